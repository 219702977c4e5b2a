fn main() {
    std::process::exit(tcmv::cli::dispatch(std::env::args()));
}

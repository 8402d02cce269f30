fn main() {
    std::process::exit(cornerseg::cli::run_from_args(std::env::args_os()));
}

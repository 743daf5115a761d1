fn main() {
    std::process::exit(stdcma::cli::run(std::env::args_os()));
}

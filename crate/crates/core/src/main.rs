fn main() {
    std::process::exit(srma::harness::cli::main_with_args(std::env::args_os()));
}

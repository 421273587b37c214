fn main() {
    std::process::exit(xanat::cli::main_with_args(std::env::args_os()));
}

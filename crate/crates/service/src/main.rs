fn main() {
    std::process::exit(factor_service::cli::main_with_args(std::env::args_os()));
}

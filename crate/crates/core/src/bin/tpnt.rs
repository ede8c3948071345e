fn main() {
    std::process::exit(transplant::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(bfflow::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(flowforge::cli::main_with_args(std::env::args_os()));
}

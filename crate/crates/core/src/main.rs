fn main() {
    std::process::exit(cascade_agent::cli::main_with_args(std::env::args_os()));
}

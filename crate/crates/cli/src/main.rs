fn main() {
    std::process::exit(domchar_cli::main_with_args(std::env::args_os()));
}

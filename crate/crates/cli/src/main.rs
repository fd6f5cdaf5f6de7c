fn main() {
    std::process::exit(modapter_cli::run_command(std::env::args_os()));
}

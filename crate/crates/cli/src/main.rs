fn main() {
    std::process::exit(dto_cli::run_command(std::env::args_os()));
}

fn main() -> std::process::ExitCode {
    descry_cli::main_with_args(std::env::args_os())
}

fn main() -> std::process::ExitCode {
    confae::cli::main_with_args(std::env::args_os())
}

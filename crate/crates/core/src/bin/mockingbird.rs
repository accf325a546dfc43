use std::process::ExitCode;

fn main() -> ExitCode {
    mockingbird::cli::main_with_args(std::env::args_os())
}

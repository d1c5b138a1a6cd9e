use std::process::ExitCode;

fn main() -> ExitCode {
    unkspoof::cli::main_with(std::env::args_os())
}

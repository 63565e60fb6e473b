use std::process::ExitCode;

fn main() -> ExitCode {
    ape_core::cli::run(std::env::args_os())
}

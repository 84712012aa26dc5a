use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(upcall_cli::run(std::env::args()) as u8)
}

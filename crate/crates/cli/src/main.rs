use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(oasis_cli::run(std::env::args_os()))
}

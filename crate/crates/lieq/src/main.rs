use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lieq::cli::run(std::env::args_os()))
}

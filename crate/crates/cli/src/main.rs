use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(llmhg_cli::run(std::env::args_os()))
}

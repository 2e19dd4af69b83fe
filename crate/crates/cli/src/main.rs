use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let (outcome, json) = taxonomist_cli::run(std::env::args_os());
    let text = outcome.render(json);
    if outcome.exit_code == taxonomist_cli::EXIT_ERROR && !json {
        let _ = std::io::stderr().write_all(text.as_bytes());
    } else {
        let _ = std::io::stdout().write_all(text.as_bytes());
    }
    ExitCode::from(outcome.exit_code as u8)
}

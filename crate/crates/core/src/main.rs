use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = hireview::cli::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(hireview::cli::EXIT_CONFIG as u8);
    }
    ExitCode::from(hireview::cli::run(std::env::args_os()) as u8)
}

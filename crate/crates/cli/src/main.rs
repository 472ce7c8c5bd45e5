use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cla_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match cla_cli::run(cli, &mut stdout) {
        Ok(()) => ExitCode::from(cla_cli::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cla_cli::exit_code(&e))
        }
    }
}

use std::process::ExitCode;

use clap::Parser;

use deftx::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.common.log_level).init();
    let mut stdout = std::io::stdout().lock();
    let raw: Vec<String> = std::env::args().skip(1).collect();
    match run(cli, &raw, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

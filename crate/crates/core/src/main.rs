use std::process::ExitCode;

use clap::Parser;
use spanprobe::cli::{self, Cli};

fn main() -> ExitCode {
    let args = Cli::parse();
    match cli::run(&args.command) {
        Ok((written, summary)) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            for path in written {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            if let Some(hint) = cli::hint(&err) {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}

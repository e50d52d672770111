use clap::Parser;

use vqcal::cli::{run, Cli};
use vqcal::Error;

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Numeric(_) => 3,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}

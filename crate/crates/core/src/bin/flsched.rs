use clap::Parser;

use flsched::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    let threads = match std::env::var(cli::THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: {} must be a non-negative integer, got `{v}`", cli::THREADS_ENV);
                std::process::exit(2);
            }
        },
        Err(_) => 0,
    };
    if let Err(e) = cli::execute(&cli, threads) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

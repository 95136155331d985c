//! Shorthand for `pyraflow bench`.

use clap::Parser;
use pyraflow_cli::BenchCommand;

#[derive(Parser)]
#[command(name = "bench", version, about = "Runtime and memory benchmarks")]
struct BenchCli {
    #[command(subcommand)]
    command: BenchCommand,
}

fn main() {
    pyraflow_cli::init_logging();
    if let Err(e) = pyraflow_cli::bench(BenchCli::parse().command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

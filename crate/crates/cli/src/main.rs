use clap::Parser;

fn main() {
    pyraflow_cli::init_logging();
    if let Err(e) = pyraflow_cli::execute(pyraflow_cli::Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

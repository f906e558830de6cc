use clap::Parser;

use fedgnn_cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(&cli.command) {
        eprintln!("fedgnn: error[{}]: {}", e.category.name(), e.message);
        std::process::exit(e.category.exit_code());
    }
}

use clap::Parser;

use credfuse::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli, &mut std::io::stdout().lock()) {
        eprintln!("credfuse: {err}");
        std::process::exit(err.category().exit_code());
    }
}

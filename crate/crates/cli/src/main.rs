use clap::Parser;
use recap_cli::{dispatch, Cli};

fn main() {
    let cli = Cli::parse();
    let code = dispatch(&cli, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}

use clap::Parser;
use halfspace_ma::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(&cli).code());
}

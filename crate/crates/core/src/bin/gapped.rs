use clap::Parser;
use gapped_ergodic::cli::{main_with, Cli};

fn main() {
    std::process::exit(main_with(Cli::parse()));
}

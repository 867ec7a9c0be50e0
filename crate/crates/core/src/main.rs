use clap::Parser;

use mfgkit::cli::{main_with, Args};

fn main() {
    let args = Args::parse();
    std::process::exit(main_with(&args));
}

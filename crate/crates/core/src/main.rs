use clap::Parser;
use dispersion_mlmc::cli::{main_with, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = main_with(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

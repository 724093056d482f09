use clap::Parser;
use streetgen_gateway::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        if !e.detail.is_null() {
            eprintln!("detail: {}", e.detail);
        }
        std::process::exit(2);
    }
}

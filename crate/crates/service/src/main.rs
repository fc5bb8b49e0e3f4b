use clap::Parser;
use pilot_service::cli::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(cli) {
        let line = serde_json::json!({ "error": format!("{e:#}") });
        eprintln!("{line}");
        std::process::exit(1);
    }
}

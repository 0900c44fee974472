//! Runs the session service.
//!
//! ```text
//! cargo run -p icount-service --example serve -- --config service.toml
//! ICOUNT_ADDR=0.0.0.0:9000 cargo run -p icount-service --example serve
//! ```

use std::path::PathBuf;

use clap::Parser;
use icount_service::{serve, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
struct Args {
    /// TOML service configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let config = ServiceConfig::load(args.config.as_deref())?;
    serve(config).await?;
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use drscreen_core::eventlog::SystemClock;
use drscreen_service::{router, Registry, Store};

#[derive(Parser)]
#[command(name = "grading-service", version, about = "Adjudication grading service")]
struct Args {
    #[arg(long, env = "GRADING_LISTEN", default_value = "127.0.0.1:8080")]
    listen: String,
    /// JSON-lines event log; replayed on start and appended to.
    #[arg(long, env = "GRADING_LOG")]
    log: PathBuf,
    /// TOML file of `[[grader]]` entries.
    #[arg(long, env = "GRADING_GRADERS")]
    graders: PathBuf,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let store = Registry::from_file(&args.graders).and_then(|r| Store::open(&args.log, r, Arc::new(SystemClock)));
    let store = match store {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&args.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot listen on {}: {e}", args.listen);
            return ExitCode::from(1);
        }
    };
    log::info!("listening on {}", args.listen);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        log::info!("shutting down");
    };
    if let Err(e) = axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

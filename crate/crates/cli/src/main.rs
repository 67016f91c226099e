use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use physbus_core::scenario;
use physbus_core::BusConfig;

#[derive(Parser)]
#[command(name = "physbus", version, about = "Simulated plug-and-play physicalisation bus")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script and check its assertions.
    Run {
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the event trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON backplane configuration (slots, heartbeat policy, timings).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarise registries and levels recorded in a trace.
    Inspect { trace: PathBuf },
    /// Serve live sessions over HTTP and WebSocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of `*.module.json` descriptors offered to clients.
        #[arg(long, default_value = "descriptors")]
        descriptors: PathBuf,
    },
}

const EXIT_USAGE: u8 = 2;

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("physbus: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn load_config(path: Option<&Path>) -> Result<BusConfig, String> {
    match path {
        None => Ok(BusConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            BusConfig::from_json(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn run(script: &Path, seed: u64, trace: Option<&Path>, config: Option<&Path>) -> ExitCode {
    let config = match load_config(config) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    let text = match fs::read_to_string(script) {
        Ok(t) => t,
        Err(e) => return usage_error(format!("{}: {e}", script.display())),
    };
    let base = script.parent().unwrap_or(Path::new("."));
    let parsed = match scenario::parse_script(&text, base) {
        Ok(s) => s,
        Err(e) => return usage_error(format!("{}: {e}", script.display())),
    };
    let mut sink: Box<dyn Write> = match trace {
        Some(p) => match fs::File::create(p) {
            Ok(f) => Box::new(io::BufWriter::new(f)),
            Err(e) => return usage_error(format!("{}: {e}", p.display())),
        },
        None => Box::new(io::stdout().lock()),
    };
    let report = match scenario::run(&parsed, seed, &config, &mut sink).and_then(|r| sink.flush().map(|_| r)) {
        Ok(r) => r,
        Err(e) => return usage_error(format!("writing trace: {e}")),
    };
    for f in &report.failures {
        eprintln!("{f}");
    }
    eprintln!(
        "{} assertion(s), {} failed, {} command(s) rejected",
        report.assertions,
        report.failures.len(),
        report.rejected_commands
    );
    ExitCode::from(report.exit_code() as u8)
}

fn inspect(trace: &Path) -> ExitCode {
    let text = match fs::read_to_string(trace) {
        Ok(t) => t,
        Err(e) => return usage_error(format!("{}: {e}", trace.display())),
    };
    match scenario::inspect(&text) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => usage_error(e),
    }
}

fn serve(addr: SocketAddr, descriptors: &Path) -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let palette = match physbus_gateway::load_palette(descriptors) {
        Ok(p) => p,
        Err(e) => return usage_error(e),
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return usage_error(e),
    };
    let result = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("physbus: serving on http://{}", listener.local_addr()?);
        physbus_gateway::serve(listener, physbus_gateway::Gateway::new(palette)).await
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => usage_error(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run {
            script,
            seed,
            trace,
            config,
        } => run(&script, seed, trace.as_deref(), config.as_deref()),
        Cmd::Inspect { trace } => inspect(&trace),
        Cmd::Serve { addr, descriptors } => serve(addr, &descriptors),
    }
}

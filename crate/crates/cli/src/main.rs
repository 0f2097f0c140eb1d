mod pipeline;
mod tutor;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soliloquy_server::config::BackendKind;
use soliloquy_server::Config;

#[derive(Parser)]
#[command(name = "soliloquy", version, about = "Physics tutorbot that checks its arithmetic in Python")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite SME solutions as numbered step-by-step solutions.
    Enrich(pipeline::EnrichArgs),
    /// Generate mock student-tutorbot conversations.
    Generate(pipeline::GenerateArgs),
    /// Convert transcripts to fine-tuning examples.
    Export(pipeline::ExportArgs),
    /// Score test cases and print the metrics table.
    Eval(pipeline::EvalArgs),
    /// Chat with the tutorbot from the terminal.
    Tutor(tutor::TutorArgs),
    /// Run the session service.
    Serve(tutor::ServeArgs),
}

/// Engine and backend settings shared by every command that talks to a model.
#[derive(Args, Debug, Clone)]
pub struct Settings {
    /// TOML settings file (also SOLILOQUY_CONFIG).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chat backend: http, replay, or sim.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Replay fixture (JSON Lines).
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Append every exchange to this fixture file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Chat-completion endpoint base URL (also SOLILOQUY_BACKEND_URL).
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

impl Settings {
    pub fn load(&self) -> anyhow::Result<Config> {
        let path = self.config.clone().or_else(|| std::env::var_os("SOLILOQUY_CONFIG").map(PathBuf::from));
        let mut config = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        }
        .with_env();
        if let Some(kind) = self.backend {
            config.backend.kind = kind;
        }
        if let Some(f) = &self.fixture {
            config.backend.fixture = Some(f.clone());
            if self.backend.is_none() {
                config.backend.kind = BackendKind::Replay;
            }
        }
        if let Some(r) = &self.record {
            config.backend.record = Some(r.clone());
        }
        if let Some(u) = &self.backend_url {
            config.backend.url = Some(u.clone());
        }
        if let Some(m) = &self.model {
            config.engine.model = m.clone();
        }
        Ok(config)
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Enrich(a) => pipeline::enrich(a).await,
        Command::Generate(a) => pipeline::generate(a).await,
        Command::Export(a) => pipeline::export(a),
        Command::Eval(a) => pipeline::eval(a).await,
        Command::Tutor(a) => tutor::tutor(a).await,
        Command::Serve(a) => tutor::serve(a).await,
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Args;
use tokio::io::{AsyncBufReadExt, BufReader};

use soliloquy_client::Client;
use soliloquy_core::api::{InlineSolution, StartSessionRequest, TraceView};
use soliloquy_server::AppState;

use crate::Settings;

#[derive(Args)]
pub struct TutorArgs {
    /// Service to talk to. Without it an in-process service is started
    /// from the engine settings.
    #[arg(long)]
    url: Option<String>,
    /// Bearer token (also SOLILOQUY_TOKEN).
    #[arg(long)]
    token: Option<String>,
    /// Question corpus for the in-process service.
    #[arg(long, conflicts_with = "url")]
    questions: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["question", "solution"])]
    question_id: Option<String>,
    #[arg(long, requires = "solution")]
    question: Option<String>,
    #[arg(long)]
    solution: Option<String>,
    /// After each reply, print the hidden soliloquy to stderr (needs an
    /// inspector token on a protected service).
    #[arg(long)]
    show_trace: bool,
    #[command(flatten)]
    settings: Settings,
}

pub async fn tutor(args: TutorArgs) -> anyhow::Result<ExitCode> {
    let base = match &args.url {
        Some(url) => url.clone(),
        None => {
            let mut config = args.settings.load()?;
            config.auth = Default::default();
            if let Some(q) = &args.questions {
                config.questions = Some(q.clone());
            }
            let state = AppState::from_config(&config).map_err(|e| anyhow::anyhow!(e))?;
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            tokio::spawn(soliloquy_server::serve(listener, Arc::new(state)));
            format!("http://{addr}")
        }
    };
    let mut client = Client::new(base);
    if let Some(t) = args.token.or_else(|| std::env::var("SOLILOQUY_TOKEN").ok()) {
        client = client.with_token(t);
    }

    let request = match (args.question_id, args.question, args.solution) {
        (Some(id), _, _) => StartSessionRequest::by_id(id),
        (None, Some(q), Some(s)) => StartSessionRequest::inline(q, InlineSolution::Text(s)),
        _ => bail!("give --question-id, or --question with --solution"),
    };
    let handle = client.start_session(&request).await.context("starting session")?;
    eprintln!("session {} (end with Ctrl-D)", handle.session_id);

    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    let mut turn = 0;
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        match client.send_message(&handle.session_id, &line).await {
            Ok(reply) => {
                println!("Tutorbot: {}", reply.response);
                if args.show_trace {
                    show_trace(&client, &handle.session_id, turn).await;
                }
                turn += 1;
                if reply.finished {
                    break;
                }
            }
            Err(e) if e.status().is_some_and(|s| s.is_server_error()) => {
                eprintln!("tutorbot unavailable, try again: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn show_trace(client: &Client, session: &str, turn: usize) {
    match client.trace(session, turn).await {
        Ok(TraceView::Complete { trace, .. }) => {
            let states: Vec<String> = trace.states().iter().map(|s| s.to_string()).collect();
            eprintln!("  [{}] repairs: {}", states.join(" -> "), trace.repair_attempts);
            if let Some(a) = &trace.artifact {
                eprintln!("  code:\n{}", a.code);
            }
            if let Some(out) = trace.python_output() {
                eprintln!("  output: {out}");
            }
            eprintln!(
                "  evaluation {}, action {}",
                trace.tutor_turn.evaluation, trace.tutor_turn.action
            );
        }
        Ok(TraceView::Failed { failure, .. }) => eprintln!("  failed: {}", failure.reason),
        Err(e) => eprintln!("  trace unavailable: {e}"),
    }
}

#[derive(Args)]
pub struct ServeArgs {
    /// Listen address; overrides the config file.
    #[arg(long)]
    bind: Option<String>,
    /// Question corpus sessions may reference by id.
    #[arg(long)]
    questions: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

pub async fn serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    let mut config = args.settings.load()?;
    if let Some(b) = args.bind {
        config.bind = b;
    }
    if let Some(q) = args.questions {
        config.questions = Some(q);
    }
    let state = AppState::from_config(&config).map_err(|e| anyhow::anyhow!(e))?;
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    soliloquy_server::serve(listener, Arc::new(state)).await?;
    Ok(ExitCode::SUCCESS)
}

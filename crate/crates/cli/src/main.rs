//! `unmask`: tokenize, train, sample, evaluate and serve.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use unmask_cli::commands::{self, load_classifier};
use unmask_cli::service::{load_registry, serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "unmask", version, about = "Absorbing-state diffusion for symbolic music")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a directory of MIDI files into a token corpus.
    Tokenize(commands::TokenizeArgs),
    /// Train a denoiser on a token corpus.
    Train(commands::TrainArgs),
    /// Generate pieces from scratch.
    Sample(commands::SampleArgs),
    /// Regenerate masked positions of existing pieces.
    Infill(commands::InfillArgs),
    /// Generate selected tracks around the others.
    Accompany(commands::AccompanyArgs),
    /// Sample with note-density guidance.
    Guide(commands::GuideArgs),
    /// Self-similarity scores of a set against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Anneal image-derived notes toward a reference's statistics.
    Confound(commands::ConfoundArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Checkpoints as `name=path` or bare paths; repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Density classifier JSON enabling guide jobs.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Piece store and job log.
    #[arg(long, default_value = "unmask-data")]
    data_dir: PathBuf,
}

fn run_serve(a: &ServeArgs) -> Result<serde_json::Value> {
    let models = load_registry(&a.models)?;
    let classifier = match &a.classifier {
        Some(path) => Some(load_classifier(Some(path), None, 0, 0, 0)?),
        None => None,
    };
    let state = AppState::open(models, classifier, &a.data_dir)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(state, SocketAddr::new(a.host, a.port)))?;
    Ok(json!({ "command": "serve", "stopped": true }))
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Tokenize(a) => commands::tokenize(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Infill(a) => commands::infill_cmd(a),
        Command::Accompany(a) => commands::accompany(a),
        Command::Guide(a) => commands::guide(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Confound(a) => commands::confound(a),
        Command::Serve(a) => run_serve(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": { "message": e.to_string(), "causes": causes } }));
            ExitCode::FAILURE
        }
    }
}

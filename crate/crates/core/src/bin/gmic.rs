use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gmic::commands;
use gmic::dataset::Split;
use gmic::evaluation::Variant;
use gmic::{GmicError, RunConfig};

#[derive(Parser)]
#[command(name = "gmic", version, about = "Saliency-guided patch classifier for high-resolution grayscale images")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data, training and search seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to disk.
    GenData,
    /// Train one model.
    Train {
        /// Dataset directory; rendered on the fly when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Random hyperparameter search.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_models: Option<usize>,
    },
    /// Evaluate a checkpoint, or an ensemble of several.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// gmic, loc, mil, noattn, random or loc-random.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score standalone PNG images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Render overlays for one exam.
    Visualize {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exam: String,
    },
    /// Finite-difference gradient suite.
    GradCheck,
}

fn run(cli: &Cli) -> gmic::Result<()> {
    let (cfg_path, seed, out) = (cli.config.as_deref(), cli.seed, cli.out.as_path());
    let default = match cli.command {
        Command::GradCheck => RunConfig::toy,
        _ => RunConfig::desk,
    };
    let cfg = commands::resolve_config(cfg_path, seed, default)?;
    match &cli.command {
        Command::GenData => {
            let m = commands::gen_data(&cfg, out)?;
            println!("wrote {} exams to {}", m.exams.len(), out.display());
        }
        Command::Train { data } => {
            let s = commands::train(&cfg, data.as_deref(), out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Search { data, n_models } => {
            let s = commands::search(&cfg, data.as_deref(), out, *n_models)?;
            println!("top-k: {:?}", s.top_k);
        }
        Command::Eval {
            data,
            checkpoints,
            variant,
            split,
        } => {
            let variant = variant.as_deref().map(Variant::parse).transpose()?;
            let split = Split::parse(split).ok_or_else(|| GmicError::config("split", format!("unknown split `{split}`")))?;
            let r = commands::eval(&cfg, data.as_deref(), checkpoints, variant, split, out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Infer { checkpoint, images } => {
            let r = commands::infer(&cfg, checkpoint, images, out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Visualize { data, checkpoint, exam } => {
            for p in commands::visualize(&cfg, data.as_deref(), checkpoint, exam, out)? {
                println!("{}", p.display());
            }
        }
        Command::GradCheck => {
            commands::grad_check(&cfg, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = run(&cli);
    let name = match cli.command {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Search { .. } => "search",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::Visualize { .. } => "visualize",
        Command::GradCheck => "grad-check",
    };
    let code = commands::finish(name, &cli.out, &result);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(code as u8)
}

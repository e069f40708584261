//! Trains one desk-scale model on the procedurally rendered corpus and
//! reports test metrics.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [config.json] [out_dir]
//! ```

use std::path::PathBuf;

use gmic::dataset::{ProceduralSource, Split};
use gmic::evaluation::{self, LoadedModel};
use gmic::training;
use gmic::RunConfig;

fn main() -> gmic::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::desk(),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/train_synthetic".into()));
    std::fs::create_dir_all(&out).map_err(|e| gmic::GmicError::io(&out, e))?;

    let source = ProceduralSource::new(cfg.data.synth.clone());
    let outcome = training::train_model(&cfg, &source, Some(&out))?;
    training::save_model(&out.join("best.gmic"), &cfg, &outcome.best, false)?;
    println!("best epoch {} (validation AUC {:?})", outcome.best_epoch, outcome.best_val_auc);

    let model = LoadedModel {
        model: outcome.model,
        store: outcome.best,
    };
    let (report, preds) = evaluation::evaluate_model(&[model], &source, &cfg, Split::Test)?;
    evaluation::write_report(&out, &report, &preds, true)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

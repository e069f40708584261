//! Trains the toy model for one epoch and renders overlays for a test exam.
//!
//! ```text
//! cargo run --release --example visualize_exam -- [out_dir]
//! ```

use std::path::PathBuf;

use gmic::dataset::{ExamSource, ProceduralSource, Split};
use gmic::evaluation::LoadedModel;
use gmic::{training, visualize, RunConfig};

fn main() -> gmic::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/visualize".into()));
    let cfg = RunConfig::toy();
    let source = ProceduralSource::new(cfg.data.synth.clone());
    let outcome = training::train_model(&cfg, &source, None)?;
    let model = LoadedModel {
        model: outcome.model,
        store: outcome.best,
    };
    let exam = source
        .manifest()
        .split(Split::Test)
        .find(|e| e.is_positive())
        .or_else(|| source.manifest().split(Split::Test).next())
        .expect("test split is nonempty")
        .id
        .clone();
    for path in visualize::visualize_exam(&model, &cfg, &source, &exam, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

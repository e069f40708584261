//! One function per CLI verb. Each writes the fully resolved configuration to
//! its output directory before starting and an exit-status file when done.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{self, RawImage, Split};
use crate::error::{GmicError, Result};
use crate::evaluation::{self, LoadedModel, Variant};
use crate::gradcheck::{self, GradRow};
use crate::roi::InputRect;
use crate::training::{self, SearchSummary};
use crate::visualize;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const EXIT_STATUS_FILE: &str = "exit_status.json";

/// Applies a `--seed` override to every seeded component.
pub fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.data.synth.seed = s;
        cfg.training.seed = s;
        cfg.search.seed = s;
    }
    cfg
}

/// Loads `path` or falls back to `default`, then applies the seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>, default: fn() -> RunConfig) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => default(),
    };
    let cfg = with_seed(cfg, seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `out` and echoes the configuration into it.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| GmicError::io(out, e))?;
    let p = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&p, cfg.to_json()).map_err(|e| GmicError::io(p, e))
}

#[derive(Debug, Serialize)]
struct ExitStatus<'a> {
    command: &'a str,
    code: i32,
    error: Option<String>,
}

/// Records the outcome in `out` (best effort) and returns the process exit code.
pub fn finish<T>(command: &str, out: &Path, result: &Result<T>) -> i32 {
    let (code, error) = match result {
        Ok(_) => (0, None),
        Err(e) => (e.exit_code(), Some(e.to_string())),
    };
    if out.is_dir() {
        let status = ExitStatus { command, code, error };
        if let Ok(text) = serde_json::to_string_pretty(&status) {
            let _ = std::fs::write(out.join(EXIT_STATUS_FILE), text);
        }
    }
    code
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<dataset::Manifest> {
    prepare_out(out, cfg)?;
    dataset::generate_dataset(&cfg.data.synth, out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    prepare_out(out, cfg)?;
    let source = dataset::open_source(data, &cfg.data.synth)?;
    let outcome = training::train_model(cfg, source.as_ref(), Some(out))?;
    let ck = out.join("best.gmic");
    training::save_model(&ck, cfg, &outcome.best, cfg.output.checkpoint_optimizer)?;
    let summary = TrainSummary {
        checkpoint: "best.gmic".into(),
        best_epoch: outcome.best_epoch,
        best_val_auc: outcome.best_val_auc,
    };
    let p = out.join("train_summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| GmicError::io(p, e))?;
    Ok(summary)
}

pub fn search(cfg: &RunConfig, data: Option<&Path>, out: &Path, n_models: Option<usize>) -> Result<SearchSummary> {
    let mut cfg = cfg.clone();
    if let Some(n) = n_models {
        cfg.search.n_models = n;
    }
    prepare_out(out, &cfg)?;
    let source = dataset::open_source(data, &cfg.data.synth)?;
    training::run_search(&cfg, source.as_ref(), out)
}

/// Loads each checkpoint with its own sidecar configuration.
pub fn load_models(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<LoadedModel>> {
    if checkpoints.is_empty() {
        return Err(GmicError::Data("no checkpoints given".into()));
    }
    checkpoints
        .iter()
        .map(|p| training::load_model(p, cfg).map(|(_, m)| m))
        .collect()
}

/// Evaluates a checkpoint or ensemble; with `variant` the AUC table keeps only that variant.
pub fn eval(
    cfg: &RunConfig,
    data: Option<&Path>,
    checkpoints: &[PathBuf],
    variant: Option<Variant>,
    split: Split,
    out: &Path,
) -> Result<evaluation::MetricsReport> {
    prepare_out(out, cfg)?;
    let models = load_models(cfg, checkpoints)?;
    let source = dataset::open_source(data, &cfg.data.synth)?;
    let (mut report, preds) = evaluation::evaluate_model(&models, source.as_ref(), cfg, split)?;
    if let Some(v) = variant {
        report.auc.retain(|k, _| k == v.name());
    }
    evaluation::write_report(out, &report, &preds, cfg.output.write_predictions)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Inference {
    pub image: String,
    pub y_loc: Vec<f64>,
    pub y_mil: Vec<f64>,
    pub y: Vec<f64>,
    pub rois: Vec<InputRect>,
    pub alpha: Vec<f64>,
}

/// Scores standalone grayscale PNGs with one model; writes `inference.json`.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], out: &Path) -> Result<Vec<Inference>> {
    prepare_out(out, cfg)?;
    let (cfg, model) = training::load_model(checkpoint, cfg)?;
    let (th, tw) = (cfg.data.image_height, cfg.data.image_width);
    let mut results = Vec::with_capacity(images.len());
    for path in images {
        let img = image::open(path)
            .map_err(|e| GmicError::Load {
                what: "image".into(),
                path: path.clone(),
                source: Box::new(e),
            })?
            .into_luma16();
        let (w, h) = img.dimensions();
        let raw = RawImage::from_u16(h as usize, w as usize, img.as_raw());
        let x = dataset::normalize_image(&raw, th, tw, cfg.data.pad_reflect)?;
        let o = evaluation::run_images(&model, &x, None)?.remove(0);
        results.push(Inference {
            image: path.to_string_lossy().into_owned(),
            y: (0..o.y_loc.len()).map(|c| o.variant(Variant::Gmic, c)).collect(),
            y_loc: o.y_loc,
            y_mil: o.y_mil,
            rois: o.rois.iter().map(|p| p.rect).collect(),
            alpha: o.alpha,
        });
    }
    let p = out.join("inference.json");
    std::fs::write(&p, serde_json::to_string_pretty(&results)?).map_err(|e| GmicError::io(p, e))?;
    Ok(results)
}

pub fn visualize(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, exam: &str, out: &Path) -> Result<Vec<PathBuf>> {
    prepare_out(out, cfg)?;
    let (model_cfg, model) = training::load_model(checkpoint, cfg)?;
    let source = dataset::open_source(data, &cfg.data.synth)?;
    visualize::visualize_exam(&model, &model_cfg, source.as_ref(), exam, out)
}

/// Default suite size: seeds per check and sampled coordinates of the composite check.
pub const GRAD_CHECK_SEEDS: usize = 20;
pub const GRAD_CHECK_COORDS: usize = 60;

/// Runs the gradient suite; any failing row is a numeric failure.
pub fn grad_check(cfg: &RunConfig, out: &Path) -> Result<Vec<GradRow>> {
    prepare_out(out, cfg)?;
    let rows = gradcheck::full_suite(cfg, GRAD_CHECK_SEEDS, GRAD_CHECK_COORDS)?;
    let p = out.join("grad_check.json");
    std::fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(|e| GmicError::io(p, e))?;
    print!("{}", gradcheck::format_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(GmicError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

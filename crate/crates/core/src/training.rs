//! Simultaneous training of both branches, balanced epoch sampling,
//! random hyperparameter search and checkpoint handling.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use diffcore::{Adam, Checkpoint, ParamStore, Tensor};
use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::LossParts;
use crate::config::{RunConfig, SearchConfig};
use crate::dataset::{self, BreastSample, ExamRecord, ExamSource, Manifest, Split};
use crate::error::{GmicError, Result};
use crate::evaluation::{self, LoadedModel};
use crate::model::Gmic;
use crate::nn::{self, Mode, Session};
use crate::synth::Side;

/// The searched and fixed knobs of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Pooling threshold in percent.
    pub t_percent: f64,
    pub k: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl HyperParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            learning_rate: cfg.training.learning_rate,
            lambda: cfg.loss.lambda,
            beta: cfg.loss.beta,
            t_percent: cfg.loss.t_percent(),
            k: cfg.retrieval.k,
            crop_height: cfg.retrieval.crop_height,
            crop_width: cfg.retrieval.crop_width,
            embedding_dim: cfg.mil.embedding_dim,
            epochs: cfg.training.epochs,
            batch_size: cfg.training.batch_size,
            seed: cfg.training.seed,
        }
    }

    /// `cfg` with these values substituted.
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.training.learning_rate = self.learning_rate;
        c.loss.lambda = self.lambda;
        c.loss.beta = self.beta;
        c.loss.pooling_t = match c.loss.t_scale {
            crate::config::TScale::Fraction => self.t_percent / 100.0,
            crate::config::TScale::Percent => self.t_percent,
        };
        c.retrieval.k = self.k;
        c.retrieval.crop_height = self.crop_height;
        c.retrieval.crop_width = self.crop_width;
        c.mil.embedding_dim = self.embedding_dim;
        c.training.epochs = self.epochs;
        c.training.batch_size = self.batch_size;
        c.training.seed = self.seed;
        c
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2], base: f64) -> f64 {
    let e = if lo == hi { lo } else { rng.random_range(lo..hi) };
    base.powf(e)
}

/// Draws one configuration: learning rate and lambda log-uniform in base 10,
/// beta and t log-uniform in base e. The exponent of `t` is read through the
/// configured `t_scale`.
pub fn sample_hyperparams(base: &RunConfig, search: &SearchConfig, search_seed: u64) -> HyperParams {
    let mut rng = ChaCha8Rng::seed_from_u64(search_seed);
    let mut hp = HyperParams::from_config(base);
    hp.learning_rate = log_uniform(&mut rng, search.log10_learning_rate, 10.0);
    hp.lambda = log_uniform(&mut rng, search.log10_lambda, 10.0);
    hp.beta = log_uniform(&mut rng, search.ln_beta, std::f64::consts::E);
    let t = log_uniform(&mut rng, search.ln_pooling_t, std::f64::consts::E);
    hp.t_percent = base.loss.t_scale.to_percent(t);
    hp.seed = rng.random();
    hp
}

/// Training exams for one epoch: every exam with a finding plus an equal
/// number of fresh negatives, shuffled.
pub fn epoch_sampler<'m>(manifest: &'m Manifest, epoch_seed: u64) -> Result<Vec<&'m ExamRecord>> {
    let (pos, neg): (Vec<_>, Vec<_>) = manifest.split(Split::Train).partition(|e| e.is_positive());
    if pos.is_empty() && neg.is_empty() {
        return Err(GmicError::Data("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut out = pos;
    if neg.len() < out.len() {
        warn!(
            "only {} negative exams for {} positives; using all negatives",
            neg.len(),
            out.len()
        );
        out.extend(neg);
    } else {
        let n = out.len();
        let mut picked = index::sample(&mut rng, neg.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| neg[i]));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Stacks breasts into a `[2B, 1, H, W]` batch and `[2B * C]` targets.
pub fn collate(batch: &[BreastSample]) -> Result<(Tensor<f32>, Vec<f32>)> {
    let first = batch.first().ok_or_else(|| GmicError::Data("empty batch".into()))?;
    let shape = first.views[0].shape().to_vec();
    let mut data = Vec::with_capacity(batch.len() * 2 * first.views[0].numel());
    let mut targets = Vec::new();
    for b in batch {
        for v in &b.views {
            if v.shape() != shape.as_slice() {
                return Err(GmicError::Data(format!("breast {} has mismatched view size", b.breast_id)));
            }
            data.extend_from_slice(v.data());
            targets.extend_from_slice(&b.labels);
        }
    }
    Ok((Tensor::new([batch.len() * 2, 1, shape[2], shape[3]], data)?, targets))
}

/// One optimization step on a batch of breasts.
pub fn train_step(model: &Gmic, store: &mut ParamStore<f32>, adam: &Adam, batch: &[BreastSample]) -> Result<LossParts> {
    let (x, targets) = collate(batch)?;
    let (grads, parts, updates) = {
        let mut s = Session::new(store, Mode::Train);
        let f = model.forward(&mut s, &x, None).map_err(numeric)?;
        let (loss, parts) = model.loss(&mut s, &f, &targets).map_err(numeric)?;
        let updates = s.take_updates();
        let grads = s.tape.backward(loss).map_err(|e| numeric(e.into()))?;
        (grads, parts, updates)
    };
    if !grads.l2_norm().is_finite() {
        return Err(GmicError::Numeric("non-finite gradient".into()));
    }
    adam.step(store, &grads)?;
    nn::apply_running_stats(store, &updates);
    Ok(parts)
}

fn numeric(e: GmicError) -> GmicError {
    match e {
        GmicError::Tensor(diffcore::Error::NonFinite { op }) => {
            GmicError::Numeric(format!("non-finite value produced by {op}"))
        }
        other => other,
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub loss_loc: f64,
    pub loss_mil: f64,
    pub loss_reg: f64,
    /// Validation breast-level AUC of the fused prediction, per class.
    pub val_auc: Vec<Option<f64>>,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub model: Gmic,
    pub config: RunConfig,
    /// Parameters of the best validation epoch.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// Index of the class used for model selection: "malignant" when present,
/// otherwise the last class.
pub fn selection_class(cfg: &RunConfig) -> usize {
    cfg.model
        .classes
        .iter()
        .position(|c| c == "malignant")
        .unwrap_or(cfg.model.classes.len() - 1)
}

fn breasts(exams: &[&ExamRecord]) -> Vec<(ExamRecord, Side)> {
    exams
        .iter()
        .flat_map(|e| [((*e).clone(), Side::Left), ((*e).clone(), Side::Right)])
        .collect()
}

/// Loads batches on a background thread, at most `depth` ahead of the consumer.
fn for_each_batch(
    source: &dyn ExamSource,
    cfg: &RunConfig,
    items: &[(ExamRecord, Side)],
    mut f: impl FnMut(Vec<BreastSample>) -> Result<()>,
) -> Result<()> {
    let (h, w, pad) = (cfg.data.image_height, cfg.data.image_width, cfg.data.pad_reflect);
    let load = |chunk: &[(ExamRecord, Side)]| -> Result<Vec<BreastSample>> {
        chunk
            .iter()
            .map(|(r, side)| dataset::load_breast(source, r, *side, h, w, pad, false))
            .collect()
    };
    let bs = cfg.training.batch_size;
    if cfg.data.prefetch == 0 {
        for chunk in items.chunks(bs) {
            f(load(chunk)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel(cfg.data.prefetch);
        scope.spawn(move || {
            for chunk in items.chunks(bs) {
                if tx.send(load(chunk)).is_err() {
                    break;
                }
            }
        });
        for batch in rx {
            f(batch?)?;
        }
        Ok(())
    })
}

/// Trains one model, keeping the parameters of the epoch with the best
/// validation AUC on the selection class, ties going to the best mean AUC over
/// all classes. Writes `train_log.jsonl` to `out`.
pub fn train_model(cfg: &RunConfig, source: &dyn ExamSource, out: Option<&Path>) -> Result<TrainOutcome> {
    let (model, mut store) = Gmic::new(cfg, cfg.training.seed)?;
    let adam = Adam::new(cfg.training.learning_rate);
    let sel = selection_class(cfg);
    let mut log = match out {
        Some(dir) => {
            let p = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| GmicError::io(&p, e))?, p))
        }
        None => None,
    };
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut best_auc: Option<f64> = None;
    let mut best_mean = f64::NEG_INFINITY;
    let mut records = Vec::new();
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.training.seed ^ 0x5EED_0F_E90C);
    for epoch in 1..=cfg.training.epochs {
        let started = Instant::now();
        let exams = epoch_sampler(source.manifest(), seeder.random())?;
        let items = breasts(&exams);
        let mut sum = LossParts::default();
        let mut steps = 0usize;
        for_each_batch(source, cfg, &items, |batch| {
            let parts = train_step(&model, &mut store, &adam, &batch).inspect_err(|e| {
                if let (GmicError::Numeric(_), Some(dir)) = (e, out) {
                    dump_failure(dir, &store, &batch, epoch, steps);
                }
            })?;
            sum.total += parts.total;
            sum.loc += parts.loc;
            sum.mil += parts.mil;
            sum.reg += parts.reg;
            steps += 1;
            Ok(())
        })?;
        let n = steps.max(1) as f64;
        let loaded = LoadedModel {
            model: model.clone(),
            store: store.clone(),
        };
        let val_auc = if source.manifest().split(Split::Validation).next().is_some() {
            let preds = evaluation::predict_split(
                std::slice::from_ref(&loaded),
                source,
                cfg,
                Split::Validation,
                evaluation::PredictOptions::SELECTION,
            )?;
            evaluation::fused_auc_per_class(&preds, cfg.num_classes())
        } else {
            vec![None; cfg.num_classes()]
        };
        let rec = EpochRecord {
            epoch,
            steps,
            loss: sum.total / n,
            loss_loc: sum.loc / n,
            loss_mil: sum.mil / n,
            loss_reg: sum.reg / n,
            val_auc: val_auc.clone(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4} (loc {:.4}, mil {:.4}) val auc {:?} in {:.0}s",
            rec.loss, rec.loss_loc, rec.loss_mil, rec.val_auc, rec.wall_seconds
        );
        if let Some((f, p)) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| GmicError::io(p.clone(), e))?;
        }
        let score = val_auc[sel];
        let defined: Vec<f64> = val_auc.iter().flatten().copied().collect();
        let mean = defined.iter().sum::<f64>() / defined.len().max(1) as f64;
        let better = match (score, best_auc) {
            // ties on the selection class fall back to the mean over classes
            (Some(s), Some(b)) => s > b || (s == b && mean > best_mean),
            (Some(_), None) => true,
            // without a defined validation AUC the latest epoch wins
            (None, _) => best_auc.is_none(),
        };
        if better {
            best = store.clone();
            best_epoch = epoch;
            best_auc = score;
            best_mean = mean;
        }
        records.push(rec);
    }
    if cfg.training.epochs == 0 {
        best = store;
    }
    Ok(TrainOutcome {
        model,
        config: cfg.clone(),
        best,
        best_epoch,
        best_val_auc: best_auc,
        epochs: records,
    })
}

fn dump_failure(dir: &Path, store: &ParamStore<f32>, batch: &[BreastSample], epoch: usize, step: usize) {
    let d = dir.join("numeric_failure");
    if std::fs::create_dir_all(&d).is_err() {
        return;
    }
    if let Ok(f) = std::fs::File::create(d.join("params.gmic")) {
        let _ = Checkpoint::from_store(store, true).write(std::io::BufWriter::new(f));
    }
    let ids: Vec<&str> = batch.iter().map(|b| b.breast_id.as_str()).collect();
    let info = serde_json::json!({ "epoch": epoch, "step": step, "breasts": ids });
    let _ = std::fs::write(d.join("state.json"), info.to_string());
}

/// Sidecar holding the configuration a checkpoint was trained with.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("config.json")
}

/// Writes the parameters and their configuration sidecar.
pub fn save_model(path: &Path, cfg: &RunConfig, store: &ParamStore<f32>, with_adam: bool) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| GmicError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    Checkpoint::from_store(store, with_adam).write(&mut w)?;
    w.flush().map_err(|e| GmicError::io(path, e))?;
    let side = config_sidecar(path);
    std::fs::write(&side, cfg.to_json()).map_err(|e| GmicError::io(side, e))
}

/// Rebuilds a model from a checkpoint, using its sidecar configuration when
/// present and `fallback` otherwise.
pub fn load_model(path: &Path, fallback: &RunConfig) -> Result<(RunConfig, LoadedModel)> {
    let side = config_sidecar(path);
    let cfg = if side.is_file() { RunConfig::load(&side)? } else { fallback.clone() };
    let (model, mut store) = Gmic::new(&cfg, 0)?;
    let f = std::fs::File::open(path).map_err(|e| GmicError::io(path, e))?;
    let ck = Checkpoint::read(std::io::BufReader::new(f))?;
    ck.restore_into(&mut store)?;
    Ok((cfg, LoadedModel { model, store }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub index: usize,
    pub hyperparams: HyperParams,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    /// All runs, best validation AUC first.
    pub runs: Vec<SearchEntry>,
    /// Checkpoints of the top-k runs, for ensembling.
    pub top_k: Vec<String>,
}

/// Trains `n_models` independently sampled configurations, `jobs` at a time.
/// Each run is seeded from its index alone, so results do not depend on `jobs`.
pub fn run_search(cfg: &RunConfig, source: &dyn ExamSource, out: &Path) -> Result<SearchSummary> {
    let n = cfg.search.n_models;
    let run = |i: usize| -> Result<SearchEntry> {
        let hp = sample_hyperparams(cfg, &cfg.search, cfg.search.seed.wrapping_add(i as u64));
        let run_cfg = hp.apply(cfg);
        run_cfg.validate()?;
        let dir = out.join(format!("model_{i:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| GmicError::io(&dir, e))?;
        let outcome = train_model(&run_cfg, source, Some(&dir))?;
        let ck = dir.join("best.gmic");
        save_model(&ck, &run_cfg, &outcome.best, false)?;
        Ok(SearchEntry {
            index: i,
            hyperparams: hp,
            best_epoch: outcome.best_epoch,
            best_val_auc: outcome.best_val_auc,
            checkpoint: ck.strip_prefix(out).unwrap_or(&ck).to_string_lossy().into_owned(),
        })
    };
    let jobs = cfg.search.jobs.min(n.max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<Result<SearchEntry>>> = (0..n).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = run(i);
                slots.lock().expect("search slots")[i] = Some(r);
            });
        }
    });
    let mut runs = results
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| {
        let key = |e: &SearchEntry| e.best_val_auc.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.index.cmp(&b.index))
    });
    let top_k = runs.iter().take(cfg.search.top_k).map(|e| e.checkpoint.clone()).collect();
    let summary = SearchSummary { runs, top_k };
    let p = out.join("search_summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| GmicError::io(p, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_round_trips_hyperparams() {
        let cfg = RunConfig::toy();
        let hp = sample_hyperparams(&cfg, &cfg.search, 7);
        let applied = hp.apply(&cfg);
        assert_eq!(HyperParams::from_config(&applied).t_percent, hp.t_percent);
        assert_eq!(HyperParams::from_config(&applied), hp);
    }
}

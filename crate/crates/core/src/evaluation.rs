//! Breast-level AUC, continuous localization precision/recall/F1, and the
//! ablation variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use diffcore::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::fuse;
use crate::config::RunConfig;
use crate::dataset::{self, BreastSample, ExamSource, Split};
use crate::error::{GmicError, Result};
use crate::mil;
use crate::model::{Attention, Gmic};
use crate::nn::{Mode, Session};
use crate::roi::{self, Grid, InputRect, RoiProposal};

/// A model with its parameters.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Gmic,
    pub store: ParamStore<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Gmic,
    Loc,
    Mil,
    Noattn,
    Random,
    LocRandom,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gmic,
        Variant::Loc,
        Variant::Mil,
        Variant::Noattn,
        Variant::Random,
        Variant::LocRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gmic => "gmic",
            Variant::Loc => "loc",
            Variant::Mil => "mil",
            Variant::Noattn => "noattn",
            Variant::Random => "random",
            Variant::LocRandom => "loc-random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GmicError::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Mean of the two view-level values.
pub fn breast_level(cc: f64, mlo: f64) -> f64 {
    0.5 * (cc + mlo)
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GmicError::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GmicError::UndefinedMetric("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, kept integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean (i + j + 2) / 2
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos * (n_pos + 1)) as u64;
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Continuous localization scores of one map against one mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `P = sum_M A / sum A`, `R = sum_M A / |M|`, `F1 = 2PR / (P + R)`.
/// Returns `None` for an empty mask. An all-zero map has `P = 0`.
pub fn continuous_prf(a: &[f64], mask: &[u8]) -> Option<Prf> {
    assert_eq!(a.len(), mask.len(), "map and mask sizes differ");
    let area = mask.iter().filter(|&&m| m != 0).count();
    if area == 0 {
        return None;
    }
    let total: f64 = a.iter().sum();
    let inside: f64 = a.iter().zip(mask).filter(|(_, &m)| m != 0).map(|(v, _)| v).sum();
    let precision = if total > 0.0 { inside / total } else { 0.0 };
    let recall = inside / area as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Some(Prf { precision, recall, f1 })
}

/// Nearest-neighbor upsampling: output pixel `(y, x)` takes cell
/// `(floor(y h / H), floor(x w / W))`.
pub fn upsample_nearest(g: &Grid, out_h: usize, out_w: usize) -> Vec<f64> {
    let cols: Vec<usize> = (0..out_w).map(|x| x * g.w / out_w).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let row = y * g.h / out_h;
        out.extend(cols.iter().map(|&c| g.at(row, c)));
    }
    out
}

/// Everything computed for one image.
#[derive(Debug, Clone)]
pub struct ImageOutput {
    pub y_loc: Vec<f64>,
    pub y_mil: Vec<f64>,
    pub y_noattn: Vec<f64>,
    pub y_random: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rois: Vec<RoiProposal<f32>>,
    pub saliency: Vec<Grid>,
}

impl ImageOutput {
    pub fn variant(&self, v: Variant, class: usize) -> f64 {
        match v {
            Variant::Gmic => fuse(self.y_loc[class], self.y_mil[class]),
            Variant::Loc => self.y_loc[class],
            Variant::Mil => self.y_mil[class],
            Variant::Noattn => self.y_noattn[class],
            Variant::Random => self.y_random[class],
            Variant::LocRandom => fuse(self.y_loc[class], self.y_random[class]),
        }
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (_, c) = t.dims2("rows").expect("rank-2 output");
    t.to_f64_vec().chunks(c).map(<[f64]>::to_vec).collect()
}

/// Evaluation-mode pass over a batch `[N, 1, H, W]`. `random` supplies the
/// random patch positions per image for the random variants; without it those
/// outputs are left empty.
pub fn run_images(m: &LoadedModel, x: &Tensor<f32>, random: Option<&[Vec<InputRect>]>) -> Result<Vec<ImageOutput>> {
    let mut s = Session::new(&m.store, Mode::Eval);
    let f = m.model.forward(&mut s, x, None)?;
    let (_, z_uniform) = mil::uniform_attention(&mut s, f.embeddings, m.model.k)?;
    let y_noattn = m.model.head.forward(&mut s, z_uniform)?;
    let y_random = match random {
        Some(r) => {
            let patches = m.model.gather_patches(x, r)?;
            let (_, _, y) = m.model.mil_branch(&mut s, patches, Attention::Gated)?;
            Some(rows(s.tape.value(y)))
        }
        None => None,
    };
    let y_loc = rows(s.tape.value(f.y_loc));
    let y_mil = rows(s.tape.value(f.y_mil));
    let noattn = rows(s.tape.value(y_noattn));
    let alpha = rows(s.tape.value(f.alpha));
    let maps = Gmic::class_grids(s.tape.value(f.a))?;
    Ok(f.rois
        .into_iter()
        .zip(maps)
        .enumerate()
        .map(|(i, (rois, saliency))| ImageOutput {
            y_loc: y_loc[i].clone(),
            y_mil: y_mil[i].clone(),
            y_noattn: noattn[i].clone(),
            y_random: y_random.as_ref().map_or_else(Vec::new, |r| r[i].clone()),
            alpha: alpha[i].clone(),
            rois,
            saliency,
        })
        .collect())
}

/// Breast-level outputs of one breast, averaged over views and over models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreastPrediction {
    pub breast_id: String,
    pub labels: Vec<bool>,
    /// `variant name -> per-class score`.
    pub scores: BTreeMap<Variant, Vec<f64>>,
    /// Per view, per class localization scores (only where a mask exists).
    #[serde(skip)]
    pub localization: Vec<Vec<Option<LocalizationSample>>>,
}

/// Localization of one image and class, with the uniform-map reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSample {
    pub model: Prf,
    /// Recall of a constant map carrying the same total mass.
    pub uniform_recall: f64,
}

fn seed_for(seed: u64, ordinal: usize) -> u64 {
    seed ^ (ordinal as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Which outputs a prediction pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictOptions {
    /// Score localization against masks.
    pub masks: bool,
    /// Also run the random-patch variants.
    pub random: bool,
}

impl PredictOptions {
    pub const FULL: Self = Self { masks: true, random: true };
    pub const SELECTION: Self = Self { masks: false, random: false };
}

/// Predicts every breast of `split`, averaging over the models of an ensemble.
pub fn predict_split(
    models: &[LoadedModel],
    source: &dyn ExamSource,
    cfg: &RunConfig,
    split: Split,
    opts: PredictOptions,
) -> Result<Vec<BreastPrediction>> {
    if models.is_empty() {
        return Err(GmicError::Data("no models to evaluate".into()));
    }
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let classes = cfg.num_classes();
    let mut out = Vec::new();
    let it = dataset::iterate_split(source, split, h, w, cfg.data.pad_reflect, opts.masks);
    for (ordinal, sample) in it.enumerate() {
        let sample = sample?;
        let seed = seed_for(cfg.training.seed, ordinal);
        out.push(predict_breast(models, &sample, classes, opts.random.then_some(seed))?);
    }
    Ok(out)
}

/// Ensemble prediction for one breast. The random variants are computed when
/// `random_seed` is given.
pub fn predict_breast(models: &[LoadedModel], sample: &BreastSample, classes: usize, random_seed: Option<u64>) -> Result<BreastPrediction> {
    let (_, _, h, w) = sample.views[0].dims4("predict")?;
    let mut x = sample.views[0].data().to_vec();
    x.extend_from_slice(sample.views[1].data());
    let x = Tensor::new([2, 1, h, w], x)?;
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| random_seed.is_some() || !matches!(v, Variant::Random | Variant::LocRandom))
        .collect();
    let mut scores: BTreeMap<Variant, Vec<f64>> = variants.iter().map(|v| (*v, vec![0.0; classes])).collect();
    let mut maps: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; h * w]; classes]; 2];
    for m in models {
        let random: Option<Vec<Vec<InputRect>>> = random_seed.map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..2)
                .map(|_| roi::random_rects(&mut rng, (h, w), m.model.crop, m.model.k))
                .collect()
        });
        let outs = run_images(m, &x, random.as_deref())?;
        for &v in &variants {
            let s = scores.get_mut(&v).expect("all variants");
            for (c, acc) in s.iter_mut().enumerate() {
                *acc += breast_level(outs[0].variant(v, c), outs[1].variant(v, c)) / models.len() as f64;
            }
        }
        if sample.masks.is_some() {
            for (vi, o) in outs.iter().enumerate() {
                for (c, g) in o.saliency.iter().enumerate() {
                    let up = upsample_nearest(g, h, w);
                    for (acc, v) in maps[vi][c].iter_mut().zip(up) {
                        *acc += v / models.len() as f64;
                    }
                }
            }
        }
    }
    let localization = match &sample.masks {
        Some(masks) => (0..2)
            .map(|vi| {
                (0..classes)
                    .map(|c| {
                        let mask = masks[vi].get(c)?.as_ref()?;
                        let a = &maps[vi][c];
                        let model = continuous_prf(a, mask)?;
                        let mean = a.iter().sum::<f64>() / a.len() as f64;
                        Some(LocalizationSample {
                            model,
                            uniform_recall: mean,
                        })
                    })
                    .collect()
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(BreastPrediction {
        breast_id: sample.breast_id.clone(),
        labels: sample.labels.iter().map(|&l| l > 0.5).collect(),
        scores,
        localization,
    })
}

/// Per-class AUC of a variant; `None` where a class lacks positives or negatives.
pub fn auc_per_class(preds: &[BreastPrediction], variant: Variant, classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let s: Vec<f64> = preds.iter().filter_map(|p| p.scores.get(&variant).map(|s| s[c])).collect();
            if s.len() != preds.len() {
                return None;
            }
            let l: Vec<bool> = preds.iter().map(|p| p.labels[c]).collect();
            roc_auc(&s, &l).ok()
        })
        .collect()
}

pub fn fused_auc_per_class(preds: &[BreastPrediction], classes: usize) -> Vec<Option<f64>> {
    auc_per_class(preds, Variant::Gmic, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    /// Images with a nonempty mask for the class.
    pub images: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Mean of per-image F1.
    pub f1: Option<f64>,
    /// Mean recall of a constant map with the same mass as the model's map.
    pub uniform_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub models: usize,
    pub breasts: usize,
    pub classes: Vec<String>,
    /// `variant -> class -> AUC`.
    pub auc: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub localization: BTreeMap<String, LocalizationSummary>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(preds: &[BreastPrediction], cfg: &RunConfig, split: Split, models: usize) -> MetricsReport {
    let classes = cfg.num_classes();
    let names = &cfg.model.classes;
    let auc = Variant::ALL
        .iter()
        .map(|&v| {
            let per = auc_per_class(preds, v, classes);
            (v.name().to_owned(), names.iter().cloned().zip(per).collect())
        })
        .collect();
    let localization = (0..classes)
        .map(|c| {
            let samples: Vec<LocalizationSample> = preds
                .iter()
                .flat_map(|p| p.localization.iter().filter_map(move |v| v.get(c).copied().flatten()))
                .collect();
            let col = |f: fn(&LocalizationSample) -> f64| mean(&samples.iter().map(f).collect::<Vec<_>>());
            (
                names[c].clone(),
                LocalizationSummary {
                    images: samples.len(),
                    precision: col(|s| s.model.precision),
                    recall: col(|s| s.model.recall),
                    f1: col(|s| s.model.f1),
                    uniform_recall: col(|s| s.uniform_recall),
                },
            )
        })
        .collect();
    MetricsReport {
        split,
        models,
        breasts: preds.len(),
        classes: names.clone(),
        auc,
        localization,
    }
}

/// Evaluates a model or ensemble on a split.
pub fn evaluate_model(models: &[LoadedModel], source: &dyn ExamSource, cfg: &RunConfig, split: Split) -> Result<(MetricsReport, Vec<BreastPrediction>)> {
    let preds = predict_split(models, source, cfg, split, PredictOptions::FULL)?;
    Ok((summarize(&preds, cfg, split, models.len()), preds))
}

/// `breast_id,class,y_loc,y_mil,y,label` rows.
pub fn predictions_csv(preds: &[BreastPrediction], classes: &[String]) -> String {
    let mut s = String::from("breast_id,class,y_loc,y_mil,y,label\n");
    for p in preds {
        for (c, name) in classes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:.8},{:.8},{:.8},{}",
                p.breast_id,
                name,
                p.scores[&Variant::Loc][c],
                p.scores[&Variant::Mil][c],
                p.scores[&Variant::Gmic][c],
                p.labels[c] as u8
            );
        }
    }
    s
}

pub fn write_report(dir: &Path, report: &MetricsReport, preds: &[BreastPrediction], csv: bool) -> Result<()> {
    let p = dir.join("metrics.json");
    std::fs::write(&p, serde_json::to_string_pretty(report)?).map_err(|e| GmicError::io(p, e))?;
    if csv {
        let p = dir.join("predictions.csv");
        std::fs::write(&p, predictions_csv(preds, &report.classes)).map_err(|e| GmicError::io(p, e))?;
    }
    Ok(())
}

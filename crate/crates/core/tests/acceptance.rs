//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 7 and 8 train one desk-scale model on the default 736x480 corpus,
//! which takes tens of minutes on a single core.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use diffcore::{ParamStore, Tape, Tensor};
use gmic::aggregation::{self, pooling_m};
use gmic::commands;
use gmic::config::RunConfig;
use gmic::dataset::{ProceduralSource, Split};
use gmic::evaluation::{self, continuous_prf, roc_auc, LoadedModel, MetricsReport, Variant};
use gmic::gradcheck;
use gmic::mil::{GatedAttention, MilHead};
use gmic::nn::{Builder, Mode, Session};
use gmic::roi::{self, Grid, InputRect};
use gmic::synth::SynthSpec;
use gmic::{training, Gmic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let t = started.elapsed();
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let rows = gradcheck::full_suite(&RunConfig::toy(), 20, commands::GRAD_CHECK_COORDS).map_err(|e| e.to_string())?;
    let worst_op = rows[..rows.len() - 1].iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let composite = rows.last().unwrap();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    let (fast, time) = within(Duration::from_secs(120), started);
    check(
        failed.is_empty() && fast,
        format!(
            "{} ops, worst op rel err {worst_op:.1e}, composite {:.1e} ({} kinks redrawn), failing {failed:?}, {time}",
            rows.len() - 1,
            composite.max_rel_err,
            composite.kinks
        ),
    )
}

fn random_lattice(rng: &mut ChaCha8Rng, h: usize, w: usize, flat: Option<f64>) -> Grid {
    let data = match flat {
        Some(v) => vec![v; h * w],
        None => {
            let mut d: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..=8) as f64 / 8.0).collect();
            d[0] = 0.0;
            d[h * w - 1] = 1.0;
            d
        }
    };
    Grid::new(h, w, data).unwrap()
}

fn retrieval_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for case in 0..200 {
        let (h, w) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let (wh, ww) = (rng.random_range(1..=4.min(h)), rng.random_range(1..=4.min(w)));
        let k = rng.random_range(1..=4);
        let flat = match case % 10 {
            0 => Some(0.0),
            1 => Some(0.7),
            _ => None,
        };
        let maps: Vec<Grid> = (0..rng.random_range(1..=2)).map(|_| random_lattice(&mut rng, h, w, flat)).collect();
        let s = 4;
        let image = vec![0u8; h * s * w * s];
        let got = roi::retrieve_rois(&image, (h * s, w * s), &maps, k, (wh * s, ww * s)).map_err(|e| e.to_string())?;
        let norm: Vec<Grid> = maps.iter().map(roi::minmax_normalize).collect();
        let want = common::greedy_oracle(&roi::class_sum(&norm).unwrap(), wh, ww, k);
        let same = got.len() == want.len() && got.iter().zip(&want).all(|(p, (win, v))| p.window == *win && p.criterion == *v);
        mismatches += !same as usize;
    }
    let (fast, time) = within(Duration::from_secs(10), started);
    check(mismatches == 0 && fast, format!("200 instances, {mismatches} mismatches, {time}"))
}

fn pooling_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean = 0.0f64;
    let mut failures = 0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let v: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let agg = |m: usize| {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(Tensor::from_f64([1, 1, h, w], &v).unwrap()).unwrap();
            let y = aggregation::f_agg(&mut tape, a, m).unwrap();
            tape.value(y).data()[0]
        };
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d = (agg(pooling_m(100.0, h * w)) - mean).abs();
        worst_mean = worst_mean.max(d);
        let t = rng.random_range(0.01..100.0);
        let y = agg(pooling_m(t, h * w));
        failures += (d >= 1e-6 || agg(1) != max || y < mean - 1e-12 || y > max) as usize;
    }
    check(failures == 0, format!("100 grids, {failures} failures, worst |mean diff| {worst_mean:.1e}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut auc_bad = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 9.0).collect();
        auc_bad += (roc_auc(&scores, &labels).unwrap() != common::pairwise_auc(&scores, &labels)) as usize;
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(4..=400);
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut mask: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        mask[0] = 1;
        let inside: f64 = a.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(v, _)| v).sum();
        let p = inside / a.iter().sum::<f64>();
        let r = inside / mask.iter().filter(|&&m| m == 1).count() as f64;
        let f = 2.0 * p * r / (p + r);
        let got = continuous_prf(&a, &mask).unwrap();
        worst = worst.max((got.precision - p).abs()).max((got.recall - r).abs()).max((got.f1 - f).abs());
    }
    check(
        auc_bad == 0 && worst < 1e-9,
        format!("AUC: {auc_bad}/50 differ from pairwise; P/R/F1 worst diff {worst:.1e}"),
    )
}

fn mil_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_perm, mut worst_sum, mut hull_bad) = (0.0f64, 0.0f64, 0);
    for bag in 0..100 {
        let k = 1 + bag % 8;
        let l = rng.random_range(1..=8);
        let mut cfg = RunConfig::toy();
        cfg.mil.embedding_dim = l;
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(bag as u64);
        let mut b = Builder::new(&mut store, &mut prng);
        let att = GatedAttention::new(&mut b, &cfg.mil).unwrap();
        let head = MilHead::new(&mut b, &cfg.model, &cfg.mil).unwrap();
        let store: ParamStore<f64> = store.cast();
        let h: Vec<Vec<f64>> = (0..k).map(|_| (0..l).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let run = |rows: &[Vec<f64>]| {
            let mut s = Session::new(&store, Mode::Eval);
            let e = s.tape.constant(Tensor::from_f64([k, l], &rows.concat()).unwrap()).unwrap();
            let (alpha, z) = att.forward(&mut s, e, k).unwrap();
            let y = head.forward(&mut s, z).unwrap();
            let get = |v| s.tape.value(v).data().to_vec();
            (get(alpha), get(z), get(y))
        };
        let (alpha, z, y) = run(&h);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let hp: Vec<Vec<f64>> = perm.iter().map(|&i| h[i].clone()).collect();
        let (_, zp, yp) = run(&hp);
        for (a, b) in z.iter().zip(&zp).chain(y.iter().zip(&yp)) {
            worst_perm = worst_perm.max((a - b).abs());
        }
        worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
        for (d, &zd) in z.iter().enumerate() {
            let lo = h.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
            let hi = h.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
            hull_bad += (zd < lo - 1e-12 || zd > hi + 1e-12 || alpha.iter().any(|&a| a < 0.0)) as usize;
        }
    }
    check(
        worst_perm < 1e-6 && worst_sum <= 1e-6 && hull_bad == 0,
        format!("100 bags, permutation diff {worst_perm:.1e}, |sum alpha - 1| {worst_sum:.1e}, hull violations {hull_bad}"),
    )
}

fn stop_gradient() -> Outcome {
    let cfg = RunConfig::toy();
    let (model, store32) = Gmic::new(&cfg, 6).map_err(|e| e.to_string())?;
    let mut store: ParamStore<f64> = store32.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = model.input;
    let x = Tensor::new([2, 1, h, w], (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let targets = [1.0, 0.0, 0.0, 1.0];

    let mil_only = |store: &ParamStore<f64>| -> (diffcore::Grads<f64>, Vec<f64>, Vec<Vec<InputRect>>) {
        let mut s = Session::new(store, Mode::Train);
        let f = model.forward(&mut s, &x, None).unwrap();
        let rects = f.rois.iter().map(|r| r.iter().map(|p| p.rect).collect()).collect();
        let y = s.tape.value(f.y_mil).data().to_vec();
        let l = s.tape.bce(f.y_mil, &targets).unwrap();
        let l = s.tape.sum_all(l).unwrap();
        (s.tape.backward(l).unwrap(), y, rects)
    };
    let (grads, y0, rects0) = mil_only(&store);
    let localizer: Vec<_> = store.ids().filter(|&id| Gmic::is_localizer_param(store.name(id))).collect();
    let nonzero = localizer
        .iter()
        .filter(|&&id| grads.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)))
        .count();
    let mil_params_reached = store
        .trainable_ids()
        .filter(|&id| !Gmic::is_localizer_param(store.name(id)))
        .all(|id| grads.get(id).is_some());

    // Structural: the patch tensor enters the graph as a constant.
    let patches = model.gather_patches(&x, &rects0).map_err(|e| e.to_string())?;
    let structural = {
        let mut s = Session::new(&store, Mode::Train);
        let p = s.tape.constant(patches).unwrap();
        !s.tape.requires_grad(p)
    };

    // Perturbation: nudging the localizer changes y_mil only by moving patches.
    let mut same_rects = 0;
    let mut moved = 0;
    for (n, &id) in localizer.iter().enumerate() {
        let saved = store.value(id).clone();
        let eps = if n % 2 == 0 { 1e-4 } else { 0.5 };
        for v in store.value_mut(id).data_mut() {
            *v += eps * rng.random_range(-1.0..1.0);
        }
        let (_, y, rects) = mil_only(&store);
        if rects == rects0 {
            same_rects += 1;
            if y != y0 {
                moved += 1;
            }
        }
        *store.value_mut(id) = saved;
    }
    check(
        nonzero == 0 && mil_params_reached && structural && moved == 0 && same_rects > 0,
        format!(
            "{} localizer tensors, {nonzero} with nonzero MIL gradient; patch constant: {structural}; \
             {same_rects} perturbations kept the patches and {moved} of them changed y_mil",
            localizer.len()
        ),
    )
}

/// Shared result of the desk-scale run for criteria 7 and 8.
struct DeskRun {
    report: MetricsReport,
    minutes: f64,
}

fn desk_run() -> Result<DeskRun, String> {
    let started = Instant::now();
    let cfg = RunConfig::desk();
    let source = ProceduralSource::new(SynthSpec::default());
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = training::train_model(&cfg, &source, Some(out.path())).map_err(|e| e.to_string())?;
    let model = LoadedModel {
        model: outcome.model,
        store: outcome.best,
    };
    let (report, _) = evaluation::evaluate_model(&[model], &source, &cfg, Split::Test).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        report,
        minutes: started.elapsed().as_secs_f64() / 60.0,
    })
}

fn auc(r: &MetricsReport, v: Variant) -> f64 {
    r.auc[v.name()]["malignant"].unwrap_or(f64::NAN)
}

fn end_to_end(run: &DeskRun) -> Outcome {
    let (g, l, m) = (auc(&run.report, Variant::Gmic), auc(&run.report, Variant::Loc), auc(&run.report, Variant::Mil));
    check(
        g >= 0.85 && g >= l.max(m) - 0.02 && run.minutes <= 60.0,
        format!("malignant AUC gmic {g:.4}, loc {l:.4}, mil {m:.4}; {:.1} min on this machine", run.minutes),
    )
}

fn localization(run: &DeskRun) -> Outcome {
    let loc = &run.report.localization["malignant"];
    let (r, u) = (loc.recall.unwrap_or(0.0), loc.uniform_recall.unwrap_or(f64::NAN));
    let (rand, mil) = (auc(&run.report, Variant::Random), auc(&run.report, Variant::Mil));
    check(
        r >= 3.0 * u && rand < mil,
        format!(
            "malignant recall {r:.4} vs uniform {u:.4} ({:.1}x over {} images); AUC random {rand:.4} < mil {mil:.4}",
            r / u,
            loc.images
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.data.synth.train_exams = 24;
    cfg.data.synth.validation_exams = 8;
    cfg.data.synth.test_exams = 8;
    cfg.data.synth.malignant_prevalence = 0.3;
    cfg.data.synth.benign_prevalence = 0.3;
    cfg.training.epochs = 2;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(name);
        commands::train(&cfg, None, &out).map_err(|e| e.to_string())?;
        let ck = out.join("best.gmic");
        let eval = out.join("eval");
        commands::eval(&cfg, None, &[ck.clone()], None, Split::Test, &eval).map_err(|e| e.to_string())?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        Ok((read(&ck)?, read(&eval.join("metrics.json"))?))
    };
    let a = run("a")?;
    let b = run("b")?;
    check(
        a == b,
        format!(
            "checkpoints identical: {}, metrics identical: {} ({} checkpoint bytes)",
            a.0 == b.0,
            a.1 == b.1,
            a.0.len()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} ({name}): {tag}: {detail}");
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "retrieval oracle", retrieval_oracle());
    report(3, "pooling limits", pooling_limits());
    report(4, "metric oracles", metric_oracles());
    report(5, "MIL properties", mil_properties());
    report(6, "stop-gradient", stop_gradient());
    match desk_run() {
        Ok(run) => {
            report(7, "end-to-end synthetic task", end_to_end(&run));
            report(8, "localization sanity", localization(&run));
        }
        Err(e) => {
            report(7, "end-to-end synthetic task", Err(format!("run failed: {e}")));
            report(8, "localization sanity", Err(format!("run failed: {e}")));
        }
    }
    report(9, "determinism", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

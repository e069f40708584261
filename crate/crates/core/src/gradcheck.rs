//! Central finite-difference verification of every engine op and of the full
//! composite objective, in 64-bit precision.

use diffcore::{BatchNormMode, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Gmic;
use crate::nn::{Mode, Session};
use crate::roi::InputRect;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Relative gap between one-sided differences that marks a non-differentiable point.
pub const KINK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradRow {
    pub name: String,
    pub seeds: usize,
    /// Worst relative error over the seeds.
    pub max_rel_err: f64,
    /// Sample points skipped as non-differentiable.
    pub kinks: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Values bounded away from zero, so rectifier kinks sit far from every sample.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> diffcore::Result<Var>;

/// Reduces the output with a fixed random projection, so every output
/// element contributes a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var, rng: &mut ChaCha8Rng) -> diffcore::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(normal(rng, &shape))?;
    let p = tape.mul(out, r)?;
    tape.sum_all(p)
}

/// Backward versus central differences for `build` at `inputs`.
pub fn check_op(build: &Build, inputs: Vec<Tensor<f64>>, seed: u64) -> diffcore::Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), t))
        .collect::<diffcore::Result<_>>()?;
    let eval = |store: &ParamStore<f64>| -> diffcore::Result<(f64, Option<diffcore::Grads<f64>>, Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars = ids.iter().map(|&id| tape.param(store, id)).collect::<diffcore::Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let loss = project(&mut tape, out, &mut rng)?;
        Ok((tape.value(loss).data()[0], None, tape, loss))
    };
    let (_, _, mut tape, loss) = eval(&store)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in &ids {
        let n = store.value(id).numel();
        let g = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&store)?.0;
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&store)?.0;
            store.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(g[i]);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

struct OpCase {
    name: &'static str,
    build: Box<Build>,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
}

fn op_cases() -> Vec<OpCase> {
    let case = |name, build: Box<Build>, inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>| OpCase { name, build, inputs };
    vec![
        case(
            "conv2d 3x3 stride 1 pad 1",
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
            Box::new(|r| vec![normal(r, &[2, 2, 5, 5]), normal(r, &[3, 2, 3, 3])]),
        ),
        case(
            "conv2d 5x5 stride 2 pad 2",
            Box::new(|t, v| t.conv2d(v[0], v[1], 2, 2)),
            Box::new(|r| vec![normal(r, &[1, 1, 8, 6]), normal(r, &[2, 1, 5, 5])]),
        ),
        case(
            "conv2d 1x1",
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0)),
            Box::new(|r| vec![normal(r, &[2, 3, 3, 4]), normal(r, &[2, 3, 1, 1])]),
        ),
        case(
            "bias_channels",
            Box::new(|t, v| t.bias_channels(v[0], v[1])),
            Box::new(|r| vec![normal(r, &[2, 3, 2, 2]), normal(r, &[3])]),
        ),
        case(
            "linear",
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
            Box::new(|r| vec![normal(r, &[3, 4]), normal(r, &[5, 4]), normal(r, &[5])]),
        ),
        case(
            "add",
            Box::new(|t, v| t.add(v[0], v[1])),
            Box::new(|r| vec![normal(r, &[2, 3]), normal(r, &[2, 3])]),
        ),
        case(
            "mul",
            Box::new(|t, v| t.mul(v[0], v[1])),
            Box::new(|r| vec![normal(r, &[2, 3]), normal(r, &[2, 3])]),
        ),
        case("scale", Box::new(|t, v| t.scale(v[0], -1.7)), Box::new(|r| vec![normal(r, &[4])])),
        case("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), Box::new(|r| vec![normal(r, &[3, 4])])),
        case("tanh", Box::new(|t, v| t.tanh(v[0])), Box::new(|r| vec![normal(r, &[3, 4])])),
        case("relu", Box::new(|t, v| t.relu(v[0])), Box::new(|r| vec![away_from_zero(r, &[3, 4])])),
        case(
            "batch_norm2d train",
            Box::new(|t, v| Ok(t.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Train)?.0)),
            Box::new(|r| vec![normal(r, &[2, 3, 3, 3]), normal(r, &[3]), normal(r, &[3])]),
        ),
        case(
            "batch_norm2d eval",
            Box::new(|t, v| {
                let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
                Ok(t.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var })?.0)
            }),
            Box::new(|r| vec![normal(r, &[2, 3, 2, 2]), normal(r, &[3]), normal(r, &[3])]),
        ),
        case(
            "global_avg_pool",
            Box::new(|t, v| t.global_avg_pool(v[0])),
            Box::new(|r| vec![normal(r, &[2, 3, 4, 5])]),
        ),
        case(
            "top_k_mean",
            Box::new(|t, v| t.top_k_mean(v[0], 3)),
            Box::new(|r| vec![uniform(r, &[2, 2, 4, 4], 0.0, 1.0)]),
        ),
        case(
            "pow_sum beta 0.5",
            Box::new(|t, v| t.pow_sum(v[0], 0.5)),
            Box::new(|r| vec![uniform(r, &[1, 2, 3, 3], 0.05, 1.0)]),
        ),
        case(
            "pow_sum beta 2.3",
            Box::new(|t, v| t.pow_sum(v[0], 2.3)),
            Box::new(|r| vec![uniform(r, &[1, 2, 3, 3], 0.05, 1.0)]),
        ),
        case(
            "bce",
            Box::new(|t, v| t.bce(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])),
            Box::new(|r| vec![uniform(r, &[3, 2], 0.05, 0.95)]),
        ),
        case("softmax", Box::new(|t, v| t.softmax(v[0])), Box::new(|r| vec![normal(r, &[3, 4])])),
        case(
            "bag_weighted_sum",
            Box::new(|t, v| t.bag_weighted_sum(v[0], v[1])),
            Box::new(|r| vec![normal(r, &[2, 3]), normal(r, &[6, 4])]),
        ),
        case(
            "reshape + sum_all",
            Box::new(|t, v| {
                let x = t.reshape(v[0], &[6])?;
                t.sum_all(x)
            }),
            Box::new(|r| vec![normal(r, &[2, 3])]),
        ),
    ]
}

/// Runs each op over `seeds` random instances.
pub fn op_suite(seeds: usize) -> Result<Vec<GradRow>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for seed in 0..seeds as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let err = check_op(&*c.build, (c.inputs)(&mut rng), seed)?;
                worst = worst.max(err);
            }
            Ok(GradRow {
                name: c.name.into(),
                seeds,
                max_rel_err: worst,
                kinks: 0,
                tolerance: OP_TOLERANCE,
                pass: worst < OP_TOLERANCE,
            })
        })
        .collect()
}

/// Composite objective as a function of the parameters, with the patch
/// positions held at `rects`.
fn composite_loss(
    model: &Gmic,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    targets: &[f64],
    rects: &[Vec<InputRect>],
) -> Result<(f64, diffcore::Grads<f64>)> {
    let mut s = Session::new(store, Mode::Train);
    let f = model.forward(&mut s, x, Some(rects))?;
    let (loss, parts) = model.loss(&mut s, &f, targets)?;
    let grads = s.tape.backward(loss)?;
    Ok((parts.total, grads))
}

/// Outcome of one composite check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeCheck {
    pub rel_err: f64,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates redrawn because the two one-sided differences disagreed.
    pub kinks: usize,
}

/// Composite check on the toy configuration: analytic gradient against
/// central differences at `coords` randomly chosen parameter coordinates.
pub fn composite_check(cfg: &RunConfig, seed: u64, coords: usize) -> Result<CompositeCheck> {
    let (model, store32) = Gmic::new(cfg, seed)?;
    let mut store: ParamStore<f64> = store32.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let (h, w) = model.input;
    let n = 2;
    let x = normal(&mut rng, &[n, 1, h, w]);
    let targets: Vec<f64> = (0..n * model.classes).map(|_| rng.random_range(0..2) as f64).collect();
    let rects: Vec<Vec<InputRect>> = {
        let mut s = Session::new(&store, Mode::Train);
        let f = model.forward(&mut s, &x, None)?;
        f.rois.iter().map(|r| r.iter().map(|p| p.rect).collect()).collect()
    };
    let (f0, grads) = composite_loss(&model, &store, &x, &targets, &rects)?;
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut analytic = Vec::with_capacity(coords);
    let mut numeric = Vec::with_capacity(coords);
    let mut kinks = 0;
    // every parameter tensor once, then random coordinates
    let mut next = 0usize;
    while analytic.len() < coords.max(ids.len()) && kinks < coords {
        let id = if next < ids.len() { ids[next] } else { ids[rng.random_range(0..ids.len())] };
        let i = rng.random_range(0..store.value(id).numel());
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + FD_STEP;
        let up = composite_loss(&model, &store, &x, &targets, &rects)?.0;
        store.value_mut(id).data_mut()[i] = orig - FD_STEP;
        let down = composite_loss(&model, &store, &x, &targets, &rects)?.0;
        store.value_mut(id).data_mut()[i] = orig;
        let (fwd, bwd) = ((up - f0) / FD_STEP, (f0 - down) / FD_STEP);
        if (fwd - bwd).abs() > KINK_TOLERANCE * fwd.abs().max(bwd.abs()).max(1.0) {
            // a rectifier or top-m boundary lies within one step: not differentiable here
            kinks += 1;
            continue;
        }
        next += 1;
        numeric.push((up - down) / (2.0 * FD_STEP));
        analytic.push(grads.get(id).map_or(0.0, |t| t.data()[i]));
    }
    Ok(CompositeCheck {
        rel_err: relative_error(&analytic, &numeric),
        coords: analytic.len(),
        kinks,
    })
}

/// Operator rows followed by the composite row.
pub fn full_suite(cfg: &RunConfig, seeds: usize, coords: usize) -> Result<Vec<GradRow>> {
    let mut rows = op_suite(seeds)?;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for seed in 0..seeds as u64 {
        let c = composite_check(cfg, seed, coords)?;
        worst = worst.max(c.rel_err);
        kinks += c.kinks;
    }
    rows.push(GradRow {
        name: "composite loss (toy model)".into(),
        seeds,
        max_rel_err: worst,
        kinks,
        tolerance: COMPOSITE_TOLERANCE,
        pass: worst < COMPOSITE_TOLERANCE,
    });
    Ok(rows)
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!("{:<30} {:>6} {:>12} {:>10} {:>6}  result\n", "check", "seeds", "max rel err", "tolerance", "kinks");
    for r in rows {
        s += &format!(
            "{:<30} {:>6} {:>12.3e} {:>10.0e} {:>6}  {}\n",
            r.name,
            r.seeds,
            r.max_rel_err,
            r.tolerance,
            r.kinks,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    s
}

//! Global prediction path and the training objective.

use diffcore::{Real, Tape, Var};

use crate::error::{GmicError, Result};

/// Cells pooled by `f_agg` for a top-`t`% threshold over `cells` locations.
pub fn pooling_m(t_percent: f64, cells: usize) -> usize {
    // the tiny slack keeps exact products such as 5% of 100 at 5, not 6
    let m = (t_percent / 100.0 * cells as f64 - 1e-9).ceil();
    (m.max(1.0) as usize).min(cells)
}

/// `[N, C, h, w] -> [N, C]`: mean of the top `m` saliency values per class.
pub fn f_agg<T: Real>(tape: &mut Tape<T>, a: Var, m: usize) -> Result<Var> {
    Ok(tape.top_k_mean(a, m)?)
}

/// `[N, C, h, w] -> [N, C]`: `sum |A|^beta` per class.
pub fn l_reg<T: Real>(tape: &mut Tape<T>, a: Var, beta: f64) -> Result<Var> {
    Ok(tape.pow_sum(a, beta)?)
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

/// Scalar parts of one evaluation of the objective, batch means.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub loc: f64,
    pub mil: f64,
    pub reg: f64,
    pub total: f64,
}

/// Per-image `sum_c BCE(y, y_loc) + BCE(y, y_mil) + lambda L_reg(A^c)`,
/// averaged over the `N` images. `targets` is `[N * C]` row-major.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    targets: &[T],
    y_loc: Var,
    y_mil: Option<Var>,
    a: Var,
    w: LossWeights,
) -> Result<(Var, LossParts)> {
    let n = tape.shape(y_loc)[0];
    let bl = tape.bce(y_loc, targets)?;
    let mut total = tape.sum_all(bl)?;
    let mut parts = LossParts {
        loc: tape.value(total).data()[0].as_f64() / n as f64,
        ..Default::default()
    };
    if let Some(y_mil) = y_mil {
        let bm = tape.bce(y_mil, targets)?;
        let sm = tape.sum_all(bm)?;
        parts.mil = tape.value(sm).data()[0].as_f64() / n as f64;
        total = tape.add(total, sm)?;
    }
    if w.lambda != 0.0 {
        let r = l_reg(tape, a, w.beta)?;
        let r = tape.sum_all(r)?;
        parts.reg = tape.value(r).data()[0].as_f64() / n as f64;
        let r = tape.scale(r, w.lambda)?;
        total = tape.add(total, r)?;
    }
    let total = tape.scale(total, 1.0 / n as f64)?;
    parts.total = tape.value(total).data()[0].as_f64();
    if !parts.total.is_finite() {
        return Err(GmicError::Numeric(format!("loss is {}", parts.total)));
    }
    Ok((total, parts))
}

/// `y = (y_loc + y_mil) / 2`.
pub fn fuse(y_loc: f64, y_mil: f64) -> f64 {
    0.5 * (y_loc + y_mil)
}

/// Sort-and-average reference for `f_agg` on one grid.
pub fn f_agg_reference(values: &[f64], m: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..m].iter().sum::<f64>() / m as f64
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with the engine's clamp.
pub fn bce_reference(y: f64, p: f64) -> f64 {
    let q = p.clamp(diffcore::BCE_CLAMP, 1.0 - diffcore::BCE_CLAMP);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

//! Multiple-instance path: patch encoder, gated attention, and the MIL head.

use diffcore::{ParamId, Real, Tensor, Var};

use crate::config::{MilConfig, ModelConfig};
use crate::error::{GmicError, Result};
use crate::nn::{Builder, ResidualTrunk, Session};

/// Residual CNN, global average pooling, then a linear map to `L` features.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub trunk: ResidualTrunk,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl PatchEncoder {
    pub fn new(b: &mut Builder<'_>, cfg: &MilConfig) -> Result<Self> {
        let trunk = b.scoped("encoder", |b| ResidualTrunk::new(b, &cfg.encoder, 1))?;
        let c = trunk.out_channels();
        let l = cfg.embedding_dim;
        let (proj_weight, proj_bias) = b.scoped("encoder.proj", |b| {
            let bound = 1.0 / (c as f64).sqrt();
            Ok((b.uniform("weight", &[l, c], bound)?, b.uniform("bias", &[l], bound)?))
        })?;
        Ok(Self {
            trunk,
            proj_weight,
            proj_bias,
        })
    }

    /// `[P, 1, h_c, w_c] -> [P, L]`.
    pub fn encode<T: Real>(&self, s: &mut Session<'_, T>, patches: Var) -> Result<Var> {
        let f = self.trunk.forward(s, patches)?;
        let pooled = s.tape.global_avg_pool(f)?;
        let w = s.param(self.proj_weight)?;
        let b = s.param(self.proj_bias)?;
        Ok(s.tape.linear(pooled, w, Some(b))?)
    }
}

/// `alpha_k = softmax_k( w . (tanh(V h_k) * sigm(U h_k)) )`.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    pub v: ParamId,
    pub u: ParamId,
    pub w: ParamId,
    pub biases: Option<(ParamId, ParamId)>,
}

impl GatedAttention {
    pub fn new(b: &mut Builder<'_>, cfg: &MilConfig) -> Result<Self> {
        let (l, da) = (cfg.embedding_dim, cfg.attention_dim);
        b.scoped("attention", |b| {
            let bl = 1.0 / (l as f64).sqrt();
            let v = b.uniform("V", &[da, l], bl)?;
            let u = b.uniform("U", &[da, l], bl)?;
            let w = b.uniform("w", &[1, da], 1.0 / (da as f64).sqrt())?;
            let biases = if cfg.attention_bias {
                Some((b.uniform("V_bias", &[da], bl)?, b.uniform("U_bias", &[da], bl)?))
            } else {
                None
            };
            Ok(Self { v, u, w, biases })
        })
    }

    /// Attention weights `[B, K]` and pooled representation `[B, L]` for
    /// `embeddings: [B*K, L]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, embeddings: Var, k: usize) -> Result<(Var, Var)> {
        let rows = s.tape.shape(embeddings)[0];
        if k == 0 || rows % k != 0 {
            return Err(GmicError::Data(format!("{rows} embeddings do not form bags of {k}")));
        }
        let v = s.param(self.v)?;
        let u = s.param(self.u)?;
        let w = s.param(self.w)?;
        let (vb, ub) = match self.biases {
            Some((vb, ub)) => (Some(s.param(vb)?), Some(s.param(ub)?)),
            None => (None, None),
        };
        let tv = s.tape.linear(embeddings, v, vb)?;
        let tv = s.tape.tanh(tv)?;
        let gu = s.tape.linear(embeddings, u, ub)?;
        let gu = s.tape.sigmoid(gu)?;
        let gated = s.tape.mul(tv, gu)?;
        let logits = s.tape.linear(gated, w, None)?;
        let logits = s.tape.reshape(logits, &[rows / k, k])?;
        let alpha = s.tape.softmax(logits)?;
        let z = s.tape.bag_weighted_sum(alpha, embeddings)?;
        Ok((alpha, z))
    }
}

/// Uniform weights `1/K` in place of attention.
pub fn uniform_attention<T: Real>(s: &mut Session<'_, T>, embeddings: Var, k: usize) -> Result<(Var, Var)> {
    let rows = s.tape.shape(embeddings)[0];
    if k == 0 || rows % k != 0 {
        return Err(GmicError::Data(format!("{rows} embeddings do not form bags of {k}")));
    }
    let alpha = s
        .tape
        .constant(Tensor::full([rows / k, k], T::from_f64(1.0 / k as f64)))?;
    let z = s.tape.bag_weighted_sum(alpha, embeddings)?;
    Ok((alpha, z))
}

/// `y_mil = sigm(w_mil^T z)`, no bias.
#[derive(Debug, Clone)]
pub struct MilHead {
    /// Stored as `[|C|, L]`.
    pub weight: ParamId,
}

impl MilHead {
    pub fn new(b: &mut Builder<'_>, model: &ModelConfig, cfg: &MilConfig) -> Result<Self> {
        let l = cfg.embedding_dim;
        let weight = b.scoped("mil_head", |b| b.uniform("weight", &[model.classes.len(), l], 1.0 / (l as f64).sqrt()))?;
        Ok(Self { weight })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, z: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let logits = s.tape.linear(z, w, None)?;
        Ok(s.tape.sigmoid(logits)?)
    }
}

/// Direct scalar evaluation of gated attention, independent of the tape.
///
/// `v`, `u` are `[Da][L]`, `w` is `[Da]`; returns `(alphas, z)`.
pub fn gated_attention_reference(embeddings: &[Vec<f64>], v: &[Vec<f64>], u: &[Vec<f64>], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let logits: Vec<f64> = embeddings
        .iter()
        .map(|h| {
            (0..w.len())
                .map(|d| {
                    let t = dot(&v[d], h).tanh();
                    let g = 1.0 / (1.0 + (-dot(&u[d], h)).exp());
                    w[d] * t * g
                })
                .sum()
        })
        .collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = e.iter().sum();
    let alphas: Vec<f64> = e.iter().map(|x| x / total).collect();
    let l = embeddings.first().map_or(0, Vec::len);
    let mut z = vec![0.0; l];
    for (a, h) in alphas.iter().zip(embeddings) {
        for (zi, hi) in z.iter_mut().zip(h) {
            *zi += a * hi;
        }
    }
    (alphas, z)
}

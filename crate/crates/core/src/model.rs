//! The full classifier: saliency map and top-t pooling on the whole image,
//! retrieved patches through the attention-pooled patch encoder, and the
//! composite objective tying the two together.

use diffcore::{ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, LossParts, LossWeights};
use crate::backbone::Localizer;
use crate::config::RunConfig;
use crate::error::{GmicError, Result};
use crate::mil::{self, GatedAttention, MilHead, PatchEncoder};
use crate::nn::{Builder, Session};
use crate::roi::{self, Grid, InputRect, RoiProposal};

/// Parameter-name prefixes of the localization network.
pub const LOCALIZER_PREFIXES: [&str; 2] = ["backbone.", "saliency."];

#[derive(Debug, Clone)]
pub struct Gmic {
    pub localizer: Localizer,
    pub encoder: PatchEncoder,
    pub attention: GatedAttention,
    pub head: MilHead,
    pub classes: usize,
    /// Input `(H, W)`.
    pub input: (usize, usize),
    /// Patch `(h_c, w_c)`.
    pub crop: (usize, usize),
    pub k: usize,
    /// Cells pooled by `f_agg`.
    pub m: usize,
    pub weights: LossWeights,
}

/// How the MIL branch weights its patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    Gated,
    Uniform,
}

/// Outputs of one forward pass over `N` images.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Saliency map `[N, C, h, w]`.
    pub a: Var,
    /// `[N, C]`.
    pub y_loc: Var,
    /// `[N*K, L]`.
    pub embeddings: Var,
    /// `[N, K]`.
    pub alpha: Var,
    /// `[N, C]`.
    pub y_mil: Var,
    /// Retrieved proposals per image.
    pub rois: Vec<Vec<RoiProposal<T>>>,
}

impl Gmic {
    /// Builds the architecture and initializes parameters from `seed`.
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let localizer = Localizer::new(&mut b, &cfg.model)?;
        let encoder = PatchEncoder::new(&mut b, &cfg.mil)?;
        let attention = GatedAttention::new(&mut b, &cfg.mil)?;
        let head = MilHead::new(&mut b, &cfg.model, &cfg.mil)?;
        let input = (cfg.data.image_height, cfg.data.image_width);
        let ds = localizer.downsample();
        let cells = (input.0 / ds) * (input.1 / ds);
        let model = Self {
            localizer,
            encoder,
            attention,
            head,
            classes: cfg.num_classes(),
            input,
            crop: (cfg.retrieval.crop_height, cfg.retrieval.crop_width),
            k: cfg.retrieval.k,
            m: aggregation::pooling_m(cfg.loss.t_percent(), cells),
            weights: LossWeights {
                lambda: cfg.loss.lambda,
                beta: cfg.loss.beta,
            },
        };
        Ok((model, store))
    }

    /// Saliency grid size `(h, w)`.
    pub fn map_dims(&self) -> (usize, usize) {
        let s = self.localizer.downsample();
        (self.input.0 / s, self.input.1 / s)
    }

    pub fn is_localizer_param(name: &str) -> bool {
        LOCALIZER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Saliency map and pooled global prediction for `x: [N, 1, H, W]`.
    pub fn localize<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let a = self.localizer.forward(s, x)?;
        let y_loc = aggregation::f_agg(&mut s.tape, a, self.m)?;
        Ok((a, y_loc))
    }

    /// Per-image class grids of a saliency map value.
    pub fn class_grids<T: Real>(a: &Tensor<T>) -> Result<Vec<Vec<Grid>>> {
        let (n, c, h, w) = a.dims4("class_grids")?;
        let data = a.to_f64_vec();
        (0..n)
            .map(|i| {
                (0..c)
                    .map(|ci| {
                        let off = (i * c + ci) * h * w;
                        Grid::new(h, w, data[off..off + h * w].to_vec())
                    })
                    .collect()
            })
            .collect()
    }

    /// Greedy retrieval on every image; reads values only, records nothing on the tape.
    pub fn retrieve<T: Real>(&self, x: &Tensor<T>, a: &Tensor<T>) -> Result<Vec<Vec<RoiProposal<T>>>> {
        let (n, _, h, w) = x.dims4("retrieve")?;
        let grids = Self::class_grids(a)?;
        (0..n)
            .map(|i| roi::retrieve_rois(x.item(i), (h, w), &grids[i], self.k, self.crop))
            .collect()
    }

    /// Stacks the patches at `rects` into a constant `[N*K, 1, h_c, w_c]` tensor.
    pub fn gather_patches<T: Real>(&self, x: &Tensor<T>, rects: &[Vec<InputRect>]) -> Result<Tensor<T>> {
        let (n, _, _, w) = x.dims4("gather_patches")?;
        if rects.len() != n || rects.iter().any(|r| r.len() != self.k) {
            return Err(GmicError::Data(format!("need {} rectangles for each of {n} images", self.k)));
        }
        let mut data = Vec::with_capacity(n * self.k * self.crop.0 * self.crop.1);
        for (i, per_image) in rects.iter().enumerate() {
            for r in per_image {
                data.extend(roi::crop(x.item(i), w, r));
            }
        }
        Ok(Tensor::new([n * self.k, 1, self.crop.0, self.crop.1], data)?)
    }

    /// MIL branch on fixed patches; the patches enter as constants.
    pub fn mil_branch<T: Real>(&self, s: &mut Session<'_, T>, patches: Tensor<T>, attention: Attention) -> Result<(Var, Var, Var)> {
        let p = s.tape.constant(patches)?;
        let h = self.encoder.encode(s, p)?;
        let (alpha, z) = match attention {
            Attention::Gated => self.attention.forward(s, h, self.k)?,
            Attention::Uniform => mil::uniform_attention(s, h, self.k)?,
        };
        let y_mil = self.head.forward(s, z)?;
        Ok((h, alpha, y_mil))
    }

    /// Full forward pass. With `rects` the patch positions are fixed instead of retrieved.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: &Tensor<T>, rects: Option<&[Vec<InputRect>]>) -> Result<Forward<T>> {
        let (_, _, h, w) = x.dims4("gmic")?;
        if (h, w) != self.input {
            return Err(GmicError::Data(format!(
                "input is {h}x{w}, model expects {}x{}",
                self.input.0, self.input.1
            )));
        }
        let xv = s.tape.constant(x.clone())?;
        let (a, y_loc) = self.localize(s, xv)?;
        let rois = self.retrieve(x, s.tape.value(a))?;
        let owned: Vec<Vec<InputRect>>;
        let rects = match rects {
            Some(r) => r,
            None => {
                owned = rois.iter().map(|r| r.iter().map(|p| p.rect).collect()).collect();
                &owned
            }
        };
        let patches = self.gather_patches(x, rects)?;
        let (embeddings, alpha, y_mil) = self.mil_branch(s, patches, Attention::Gated)?;
        Ok(Forward {
            a,
            y_loc,
            embeddings,
            alpha,
            y_mil,
            rois,
        })
    }

    /// Composite objective for a forward pass; `targets` is `[N * C]`.
    pub fn loss<T: Real>(&self, s: &mut Session<'_, T>, f: &Forward<T>, targets: &[T]) -> Result<(Var, LossParts)> {
        aggregation::total_loss(&mut s.tape, targets, f.y_loc, Some(f.y_mil), f.a, self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    #[test]
    fn toy_forward_shapes() {
        let cfg = RunConfig::toy();
        let (model, store) = Gmic::new(&cfg, 1).unwrap();
        let x = Tensor::new([2, 1, 64, 64], (0..2 * 64 * 64).map(|i| ((i % 7) as f32) - 3.0).collect()).unwrap();
        let mut s = Session::new(&store, Mode::Train);
        let f = model.forward(&mut s, &x, None).unwrap();
        assert_eq!(s.tape.shape(f.a), &[2, 2, 8, 8]);
        assert_eq!(s.tape.shape(f.y_loc), &[2, 2]);
        assert_eq!(s.tape.shape(f.alpha), &[2, 2]);
        assert_eq!(s.tape.shape(f.y_mil), &[2, 2]);
        assert_eq!(f.rois[0].len(), 2);
        assert_eq!(f.rois[0][0].patch.len(), 16 * 16);
    }
}

//! Localization network: residual feature extractor and the 1x1 saliency head.

use diffcore::{ParamId, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Builder, ResidualTrunk, Session};

#[derive(Debug, Clone)]
pub struct Localizer {
    pub trunk: ResidualTrunk,
    /// `[|C|, C_feat, 1, 1]`.
    pub head_weight: ParamId,
    /// `[|C|]`.
    pub head_bias: ParamId,
}

impl Localizer {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let trunk = b.scoped("backbone", |b| ResidualTrunk::new(b, &cfg.backbone, 1))?;
        let classes = cfg.classes.len();
        let c = trunk.out_channels();
        let (head_weight, head_bias) = b.scoped("saliency", |b| {
            let w = b.fan_in_normal("weight", &[classes, c, 1, 1], c, 1.0)?;
            let bias = b.param("bias", Tensor::full([classes], cfg.saliency_bias_init as f32))?;
            Ok((w, bias))
        })?;
        Ok(Self {
            trunk,
            head_weight,
            head_bias,
        })
    }

    pub fn downsample(&self) -> usize {
        self.trunk.downsample()
    }

    /// `[N, 1, H, W] -> [N, C_feat, H/s, W/s]`.
    pub fn extract_features<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = s.tape.value(x).dims4("extract_features")?;
        let ds = self.downsample();
        if h % ds != 0 || w % ds != 0 {
            return Err(diffcore::Error::InvalidShape {
                op: "extract_features",
                detail: format!("input {h}x{w} is not divisible by the downsample factor {ds}"),
            }
            .into());
        }
        self.trunk.forward(s, x)
    }

    /// `A = sigmoid(conv1x1(F) + b)`, shape `[N, |C|, h, w]`.
    pub fn saliency_head<T: Real>(&self, s: &mut Session<'_, T>, features: Var) -> Result<Var> {
        let w = s.param(self.head_weight)?;
        let b = s.param(self.head_bias)?;
        let logits = s.tape.conv2d(features, w, 1, 0)?;
        let logits = s.tape.bias_channels(logits, b)?;
        Ok(s.tape.sigmoid(logits)?)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let f = self.extract_features(s, x)?;
        self.saliency_head(s, f)
    }
}

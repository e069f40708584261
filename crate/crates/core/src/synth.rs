//! Synthetic screening exams: four grayscale views per exam, a breast-shaped
//! intensity ramp over smoothed noise, and planted benign (smooth ellipse) or
//! malignant (spiculated) lesions with exact masks.
//!
//! Everything about an exam is a pure function of `(spec.seed, exam index)`,
//! so exams can be rendered on demand or written to disk and read back
//! identically.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GmicError, Result};

pub const CLASS_NAMES: [&str; 2] = ["benign", "malignant"];
pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub train_exams: usize,
    pub validation_exams: usize,
    pub test_exams: usize,
    /// Per-breast probability of carrying a benign lesion.
    pub benign_prevalence: f64,
    /// Per-breast probability of carrying a malignant lesion.
    pub malignant_prevalence: f64,
    /// Equivalent-circle lesion radius range in pixels.
    pub lesion_radius: [f64; 2],
    /// Peak lesion brightness above the surrounding tissue.
    pub lesion_contrast: [f64; 2],
    /// Standard deviation (pixels) of the Gaussian smoothing applied to tissue noise.
    pub texture_scale: f64,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_height: 736,
            image_width: 480,
            train_exams: 2000,
            validation_exams: 400,
            test_exams: 400,
            benign_prevalence: 0.08,
            malignant_prevalence: 0.08,
            // pi r^2 spans 1% to 3% of 736x480
            lesion_radius: [34.0, 58.0],
            lesion_contrast: [0.14, 0.24],
            texture_scale: 8.0,
            texture_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// 64x64 corpus with a handful of exams, for smoke tests and gradient checks.
    pub fn toy() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            train_exams: 8,
            validation_exams: 4,
            test_exams: 4,
            benign_prevalence: 0.4,
            malignant_prevalence: 0.4,
            lesion_radius: [4.0, 6.0],
            lesion_contrast: [0.2, 0.3],
            texture_scale: 2.0,
            texture_amplitude: 0.06,
            seed: 0,
        }
    }

    pub fn total_exams(&self) -> usize {
        self.train_exams + self.validation_exams + self.test_exams
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if h < 32 || w < 32 {
            return Err(GmicError::config(format!("{path}.image_height"), "images must be at least 32x32"));
        }
        for (name, p) in [
            ("benign_prevalence", self.benign_prevalence),
            ("malignant_prevalence", self.malignant_prevalence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GmicError::config(format!("{path}.{name}"), "must lie in [0, 1]"));
            }
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(GmicError::config(format!("{path}.lesion_radius"), "need 0 < lo <= hi"));
        }
        if r1 > 0.15 * h.min(w) as f64 {
            return Err(GmicError::config(
                format!("{path}.lesion_radius"),
                format!("radius {r1} does not fit a {h}x{w} breast"),
            ));
        }
        let [c0, c1] = self.lesion_contrast;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 0.5) {
            return Err(GmicError::config(format!("{path}.lesion_contrast"), "need 0 < lo <= hi <= 0.5"));
        }
        if !(self.texture_scale > 0.0) || !(0.0..=0.3).contains(&self.texture_amplitude) {
            return Err(GmicError::config(format!("{path}.texture_scale"), "texture out of range"));
        }
        if self.train_exams == 0 {
            return Err(GmicError::config(format!("{path}.train_exams"), "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewKind {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "MLO")]
    Mlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct View {
    pub side: Side,
    pub kind: ViewKind,
}

impl View {
    pub const ALL: [View; 4] = [
        View { side: Side::Left, kind: ViewKind::Cc },
        View { side: Side::Left, kind: ViewKind::Mlo },
        View { side: Side::Right, kind: ViewKind::Cc },
        View { side: Side::Right, kind: ViewKind::Mlo },
    ];

    pub fn name(self) -> &'static str {
        match (self.side, self.kind) {
            (Side::Left, ViewKind::Cc) => "L-CC",
            (Side::Left, ViewKind::Mlo) => "L-MLO",
            (Side::Right, ViewKind::Cc) => "R-CC",
            (Side::Right, ViewKind::Mlo) => "R-MLO",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

/// One planted lesion, described in breast coordinates shared by both views.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub class: usize,
    /// Fraction of the breast depth from the chest wall.
    pub depth: f64,
    /// Signed fraction of the breast half-height.
    pub lateral: f64,
    /// Ellipse semi-axes in pixels before star perturbation.
    pub semi_axes: (f64, f64),
    pub orientation: f64,
    pub contrast: f64,
    /// `(spike count, amplitude, phase)` for malignant lesions.
    pub spikes: Option<(u32, f64, f64)>,
}

impl Lesion {
    /// Boundary radius along direction `theta` (image frame).
    pub fn radius(&self, theta: f64) -> f64 {
        let (a, b) = self.semi_axes;
        let phi = theta - self.orientation;
        let base = a * b / ((b * phi.cos()).powi(2) + (a * phi.sin()).powi(2)).sqrt();
        match self.spikes {
            Some((n, amp, phase)) => {
                let s = (0.5 + 0.5 * (n as f64 * theta + phase).cos()).powi(4);
                base * (1.0 - 0.25 * amp + amp * s)
            }
            None => base,
        }
    }

    /// Area enclosed by the boundary, `1/2 * integral r(theta)^2`.
    pub fn area(&self) -> f64 {
        let n = 4096;
        let dt = 2.0 * PI / n as f64;
        (0..n).map(|i| self.radius(i as f64 * dt).powi(2)).sum::<f64>() * 0.5 * dt
    }
}

/// Labels and lesions of one exam; the latent truth every view is rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamPlan {
    pub index: usize,
    /// `labels[side][class]`.
    pub labels: [[bool; 2]; 2],
    pub lesions: [Vec<Lesion>; 2],
}

fn sub_seed(seed: u64, index: usize, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Breast outline: a half ellipse against the chest wall.
struct Geometry {
    h: f64,
    w: f64,
    cy: f64,
    ry: f64,
    rx: f64,
}

impl Geometry {
    fn new(spec: &SynthSpec) -> Self {
        let (h, w) = (spec.image_height as f64, spec.image_width as f64);
        Self {
            h,
            w,
            cy: h / 2.0,
            ry: 0.46 * h,
            rx: 0.88 * w,
        }
    }

    /// Lesion center in pixel coordinates for a left-oriented view.
    fn center(&self, kind: ViewKind, lesion: &Lesion) -> (f64, f64) {
        let x = lesion.depth * self.rx;
        let y = match kind {
            ViewKind::Cc => self.cy + 0.8 * lesion.lateral * self.ry,
            ViewKind::Mlo => self.cy + (0.7 * lesion.lateral + 0.12) * self.ry,
        };
        (y, x)
    }

    fn breast_norm(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy) / self.ry).powi(2) + (x / self.rx).powi(2)
    }

    fn in_pectoral(&self, y: f64, x: f64) -> bool {
        x < 0.32 * self.w * (1.0 - y / (0.5 * self.h))
    }
}

fn sample_lesion(rng: &mut ChaCha8Rng, spec: &SynthSpec, class: usize) -> Lesion {
    let [r0, r1] = spec.lesion_radius;
    let target = rng.random_range(r0..=r1);
    let ratio = rng.random_range(0.65..=1.0f64);
    let spikes = (class == MALIGNANT).then(|| {
        (
            rng.random_range(6..=10u32),
            rng.random_range(0.35..=0.55f64),
            rng.random_range(0.0..2.0 * PI),
        )
    });
    let mut lesion = Lesion {
        class,
        depth: rng.random_range(0.25..=0.72),
        lateral: rng.random_range(-0.6..=0.6),
        semi_axes: (1.0 / ratio.sqrt(), ratio.sqrt()),
        orientation: rng.random_range(0.0..PI),
        contrast: rng.random_range(spec.lesion_contrast[0]..=spec.lesion_contrast[1]),
        spikes,
    };
    // rescale so the enclosed area equals pi * target^2
    let k = target * (PI / lesion.area()).sqrt();
    lesion.semi_axes = (lesion.semi_axes.0 * k, lesion.semi_axes.1 * k);
    lesion
}

fn max_radius(l: &Lesion) -> f64 {
    let (a, b) = l.semi_axes;
    let spike = l.spikes.map_or(1.0, |(_, amp, _)| 1.0 + 0.75 * amp);
    a.max(b) * spike
}

fn placement_ok(geo: &Geometry, lesion: &Lesion, others: &[Lesion]) -> bool {
    let r = max_radius(lesion);
    for kind in [ViewKind::Cc, ViewKind::Mlo] {
        let (y, x) = geo.center(kind, lesion);
        if geo.breast_norm(y, x) > 0.62 || y - r < 1.0 || y + r > geo.h - 2.0 || x - r < 1.0 {
            return false;
        }
        if kind == ViewKind::Mlo && (geo.in_pectoral(y - r, x - r) || geo.in_pectoral(y, x - r)) {
            return false;
        }
        for o in others {
            let (oy, ox) = geo.center(kind, o);
            if (oy - y).hypot(ox - x) < r + max_radius(o) + 4.0 {
                return false;
            }
        }
    }
    true
}

/// Draws labels and lesion layout for exam `index`.
pub fn plan_exam(spec: &SynthSpec, index: usize) -> ExamPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, index, 0));
    let geo = Geometry::new(spec);
    let mut labels = [[false; 2]; 2];
    let mut lesions: [Vec<Lesion>; 2] = [Vec::new(), Vec::new()];
    for side in 0..2 {
        for (class, p) in [(BENIGN, spec.benign_prevalence), (MALIGNANT, spec.malignant_prevalence)] {
            if !rng.random_bool(p) {
                continue;
            }
            for _ in 0..64 {
                let lesion = sample_lesion(&mut rng, spec, class);
                if placement_ok(&geo, &lesion, &lesions[side]) {
                    lesions[side].push(lesion);
                    labels[side][class] = true;
                    break;
                }
            }
        }
    }
    ExamPlan { index, labels, lesions }
}

/// A rendered view: intensities quantized to 16 bits, masks per class.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    /// Binary masks (`0` or `1`) for each class with a lesion in this breast.
    pub masks: [Option<Vec<u8>>; 2],
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * data[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let yy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                out[y * w + x] += kv * tmp[yy * w + x];
            }
        }
    }
    out
}

/// Smoothed unit-variance noise, synthesized at quarter resolution and
/// bilinearly upsampled.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let f = if scale >= 4.0 { 4 } else { 1 };
    let (hs, ws) = (h.div_ceil(f) + 1, w.div_ceil(f) + 1);
    let noise: Vec<f64> = (0..hs * ws).map(|_| StandardNormal.sample(rng)).collect();
    let sigma = scale / f as f64;
    let mut low = blur(&noise, hs, ws, sigma);
    // smoothing shrinks the variance; restore it
    let var = low.iter().map(|v| v * v).sum::<f64>() / low.len() as f64;
    let inv = 1.0 / var.sqrt().max(1e-12);
    low.iter_mut().for_each(|v| *v *= inv);
    if f == 1 {
        low.truncate(h * ws);
        return (0..h).flat_map(|y| low[y * ws..y * ws + w].to_vec()).collect();
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / f as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / f as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| low[yy * ws + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one view of a planned exam.
pub fn render_view(spec: &SynthSpec, plan: &ExamPlan, view: View) -> RenderedView {
    let (h, w) = (spec.image_height, spec.image_width);
    let geo = Geometry::new(spec);
    let view_salt = 1 + View::ALL.iter().position(|v| *v == view).unwrap() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, plan.index, view_salt));
    let tex = texture(&mut rng, h, w, spec.texture_scale);
    let fine: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let n = geo.breast_norm(yf, xf);
            let i = y * w + x;
            img[i] = if n < 1.0 {
                let ramp = (1.0 - n).sqrt();
                let skin = smoothstep(1.0, 0.9, n);
                let mut v = 0.18 + 0.32 * ramp + spec.texture_amplitude * tex[i] * skin;
                if view.kind == ViewKind::Mlo && geo.in_pectoral(yf, xf) {
                    v += 0.18;
                }
                v
            } else {
                0.03
            } + 0.01 * fine[i];
        }
    }

    let mut masks: [Option<Vec<u8>>; 2] = [None, None];
    for lesion in &plan.lesions[view.side.index()] {
        let (cy, cx) = geo.center(view.kind, lesion);
        let reach = max_radius(lesion) + 2.0;
        let mask = masks[lesion.class].get_or_insert_with(|| vec![0u8; h * w]);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let rho = dy.hypot(dx) / lesion.radius(dy.atan2(dx));
                let gain = if lesion.spikes.is_some() {
                    // dense core with a sharp rim
                    1.0 - smoothstep(0.9, 1.0, rho)
                } else {
                    (1.0 - rho * rho).max(0.0).powf(0.75)
                };
                img[y * w + x] += lesion.contrast * gain;
                if rho <= 1.0 {
                    mask[y * w + x] = 1;
                }
            }
        }
    }

    if view.side == Side::Right {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
        for m in masks.iter_mut().flatten() {
            for row in m.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    let pixels = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    RenderedView {
        height: h,
        width: w,
        pixels,
        masks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lesion_area_matches_requested_radius() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in [BENIGN, MALIGNANT] {
            let l = sample_lesion(&mut rng, &spec, class);
            let frac = l.area() / (736.0 * 480.0);
            assert!((0.0099..=0.0301).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn view_names_round_trip() {
        for v in View::ALL {
            assert_eq!(View::parse(v.name()), Some(v));
        }
        assert_eq!(View::parse("X-CC"), None);
    }

    #[test]
    fn plan_is_deterministic() {
        let spec = SynthSpec::toy();
        assert_eq!(plan_exam(&spec, 5), plan_exam(&spec, 5));
    }

    #[test]
    fn blur_preserves_constant() {
        let out = blur(&vec![2.0; 30], 5, 6, 1.5);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}

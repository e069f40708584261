//! Static PNG renderings of a view: mask outlines and retrieved patches on the
//! grayscale image, and one saliency heat overlay per class.
//!
//! Saliency is upsampled by nearest neighbour, so every overlay pixel carries
//! a value that exists in the map.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{self, ExamSource};
use crate::error::{GmicError, Result};
use crate::evaluation::{self, ImageOutput, LoadedModel};
use crate::roi::{Grid, InputRect, SmWindow};
use crate::synth::View;

const MASK_COLORS: [Rgb<u8>; 2] = [Rgb([40, 220, 60]), Rgb([240, 40, 40])];
const ROI_COLOR: Rgb<u8> = Rgb([255, 210, 0]);
const HEAT_ALPHA: f64 = 0.5;

/// Sidecar entry for one retrieved patch.
#[derive(Debug, Clone, Serialize)]
pub struct PatchNote {
    pub rank: usize,
    pub window: SmWindow,
    pub rect: InputRect,
    pub criterion: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewNote {
    pub exam: String,
    pub view: String,
    pub y_loc: Vec<f64>,
    pub y_mil: Vec<f64>,
    pub patches: Vec<PatchNote>,
}

fn gray(pixels: &[f32], h: usize, w: usize) -> RgbImage {
    let lo = pixels.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = ((pixels[y as usize * w + x as usize] - lo) / span * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

/// Mask pixels with at least one 4-neighbour outside the mask.
pub fn outline(mask: &[u8], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] != 0;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn draw_rect(img: &mut RgbImage, r: &InputRect, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let (y1, x1) = ((r.y + r.height - 1).min(h as usize - 1), (r.x + r.width - 1).min(w as usize - 1));
    for t in 0..2 {
        for x in r.x..=x1 {
            img.put_pixel(x as u32, (r.y + t).min(y1) as u32, color);
            img.put_pixel(x as u32, y1.saturating_sub(t) as u32, color);
        }
        for y in r.y..=y1 {
            img.put_pixel((r.x + t).min(x1) as u32, y as u32, color);
            img.put_pixel(x1.saturating_sub(t) as u32, y as u32, color);
        }
    }
}

/// Blue through green to red for `v` in `[0, 1]`.
pub fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

fn heat_overlay(base: &RgbImage, map: &Grid) -> RgbImage {
    let (w, h) = base.dimensions();
    let up = evaluation::upsample_nearest(map, h as usize, w as usize);
    let mut img = base.clone();
    for (i, px) in img.pixels_mut().enumerate() {
        let c = heat(up[i]);
        for (ch, hc) in px.0.iter_mut().zip(c) {
            *ch = ((1.0 - HEAT_ALPHA) * *ch as f64 + HEAT_ALPHA * hc).round() as u8;
        }
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| GmicError::io(path, std::io::Error::other(e.to_string())))
}

/// Renders every view of `exam_id` into `out`; returns the files written.
pub fn visualize_exam(model: &LoadedModel, cfg: &RunConfig, source: &dyn ExamSource, exam_id: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let record = source
        .manifest()
        .exams
        .iter()
        .find(|e| e.id == exam_id)
        .ok_or_else(|| GmicError::Data(format!("exam {exam_id} is not in the manifest")))?;
    std::fs::create_dir_all(out).map_err(|e| GmicError::io(out, e))?;
    let (th, tw, pad) = (cfg.data.image_height, cfg.data.image_width, cfg.data.pad_reflect);
    let classes = &source.manifest().classes;
    let mut written = Vec::new();
    for view in View::ALL {
        let lv = source.load_view(record, view, true)?;
        let (h, w) = (lv.image.height, lv.image.width);
        let x = dataset::normalize_image(&lv.image, th, tw, pad)?;
        let pixels = dataset::fit_to(&lv.image.data, h, w, th, tw, pad)?;
        let o: ImageOutput = evaluation::run_images(model, &x, None)?.remove(0);
        let stem = format!("{}_{}", record.id, view.name());
        let base = gray(&pixels, th, tw);

        let mut overview = base.clone();
        for (ci, m) in lv.masks.iter().enumerate() {
            let Some(m) = m else { continue };
            let m = dataset::fit_to(m, h, w, th, tw, pad)?;
            for (y, x) in outline(&m, th, tw) {
                overview.put_pixel(x as u32, y as u32, MASK_COLORS[ci % MASK_COLORS.len()]);
            }
        }
        for p in &o.rois {
            draw_rect(&mut overview, &p.rect, ROI_COLOR);
        }
        let path = out.join(format!("{stem}.png"));
        save(&overview, &path)?;
        written.push(path);

        for (ci, map) in o.saliency.iter().enumerate() {
            let name = classes.get(ci).map_or_else(|| format!("class{ci}"), Clone::clone);
            let path = out.join(format!("{stem}_saliency_{name}.png"));
            save(&heat_overlay(&base, map), &path)?;
            written.push(path);
        }

        let note = ViewNote {
            exam: record.id.clone(),
            view: view.name().into(),
            y_loc: o.y_loc.clone(),
            y_mil: o.y_mil.clone(),
            patches: o
                .rois
                .iter()
                .zip(&o.alpha)
                .map(|(p, &alpha)| PatchNote {
                    rank: p.rank,
                    window: p.window,
                    rect: p.rect,
                    criterion: p.criterion,
                    alpha,
                })
                .collect(),
        };
        let path = out.join(format!("{stem}_patches.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&note)?).map_err(|e| GmicError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

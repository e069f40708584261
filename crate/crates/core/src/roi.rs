//! Greedy ROI retrieval from a saliency map.
//!
//! Each round picks the window with the largest covered mass on the class-summed,
//! min-max normalized map, then zeroes the cells it covers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmicError, Result};

/// A dense row-major `h x w` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(GmicError::Data(format!("grid {h}x{w} with {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }
}

/// `(v - min) / (max - min)`; a constant grid maps to zeros.
pub fn minmax_normalize(g: &Grid) -> Grid {
    let lo = g.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        g.data.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; g.data.len()]
    };
    Grid { h: g.h, w: g.w, data }
}

/// Elementwise sum of the per-class grids.
pub fn class_sum(grids: &[Grid]) -> Result<Grid> {
    let first = grids.first().ok_or_else(|| GmicError::Data("class_sum of no grids".into()))?;
    let mut out = Grid::zeros(first.h, first.w);
    for g in grids {
        if (g.h, g.w) != (first.h, first.w) {
            return Err(GmicError::Data(format!(
                "class grids differ in shape: {}x{} vs {}x{}",
                g.h, g.w, first.h, first.w
            )));
        }
        out.data.iter_mut().zip(&g.data).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// A window on the saliency grid, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmWindow {
    pub i: usize,
    pub j: usize,
    pub height: usize,
    pub width: usize,
}

/// Values are held in fixed point so window sums are exact and independent of
/// summation order.
const FIXED_ONE: f64 = 4_294_967_296.0;
const FIXED_LIMIT: f64 = 1_048_576.0;

fn to_fixed(v: f64) -> Result<i64> {
    if !v.is_finite() || v.abs() >= FIXED_LIMIT {
        return Err(GmicError::Numeric(format!("saliency value {v} outside the summable range")));
    }
    Ok((v * FIXED_ONE).round() as i64)
}

/// Summed-area table: O(1) sums over any rectangle.
#[derive(Debug, Clone)]
pub struct SumTable {
    h: usize,
    w: usize,
    // (h+1) x (w+1) prefix sums with a zero border
    s: Vec<i64>,
}

impl SumTable {
    pub fn new(g: &Grid) -> Result<Self> {
        let (h, w) = (g.h, g.w);
        let mut s = vec![0i64; (h + 1) * (w + 1)];
        for i in 0..h {
            let mut row = 0i64;
            for j in 0..w {
                row += to_fixed(g.at(i, j))?;
                s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
            }
        }
        Ok(Self { h, w, s })
    }

    fn raw(&self, win: &SmWindow) -> i64 {
        let stride = self.w + 1;
        let (i0, j0, i1, j1) = (win.i, win.j, win.i + win.height, win.j + win.width);
        self.s[i1 * stride + j1] - self.s[i0 * stride + j1] - self.s[i1 * stride + j0] + self.s[i0 * stride + j0]
    }

    pub fn fits(&self, win: &SmWindow) -> bool {
        win.height >= 1 && win.width >= 1 && win.i + win.height <= self.h && win.j + win.width <= self.w
    }

    pub fn window_sum(&self, win: &SmWindow) -> Result<f64> {
        if !self.fits(win) {
            return Err(GmicError::Data(format!("window {win:?} outside {}x{} grid", self.h, self.w)));
        }
        Ok(self.raw(win) as f64 / FIXED_ONE)
    }

    /// Maximizing window of the given size. Ties go to the window covering the
    /// fewest cells of `claimed` (when given), then to the first row-major position.
    pub fn argmax(&self, height: usize, width: usize, claimed: Option<&SumTable>) -> Option<(SmWindow, f64)> {
        if height == 0 || width == 0 || height > self.h || width > self.w {
            return None;
        }
        let mut best: Option<(SmWindow, i64, i64)> = None;
        for i in 0..=self.h - height {
            for j in 0..=self.w - width {
                let win = SmWindow { i, j, height, width };
                let v = self.raw(&win);
                let overlap = claimed.map_or(0, |c| c.raw(&win));
                if best.is_none_or(|(_, bv, bo)| v > bv || (v == bv && overlap < bo)) {
                    best = Some((win, v, overlap));
                }
            }
        }
        best.map(|(w, v, _)| (w, v as f64 / FIXED_ONE))
    }
}

/// Sum of the grid cells covered by `win`.
pub fn window_criterion(g: &Grid, win: &SmWindow) -> Result<f64> {
    SumTable::new(g)?.window_sum(win)
}

/// Window size in cells for a `crop_h x crop_w` patch on an `h x w` map of an `big_h x big_w` image.
pub fn window_dims(crop: (usize, usize), map: (usize, usize), image: (usize, usize)) -> (usize, usize) {
    let cells = |c: usize, m: usize, i: usize| ((c as f64 * m as f64 / i as f64).round() as usize).clamp(1, m);
    (cells(crop.0, map.0, image.0), cells(crop.1, map.1, image.1))
}

/// Greedy selection of `k` windows with the reset rule applied between rounds.
///
/// Equal-criterion candidates prefer unclaimed cells, so a flat map yields
/// successive non-overlapping windows rather than the same window again.
pub fn greedy_windows(a_hat: &Grid, height: usize, width: usize, k: usize) -> Result<Vec<(SmWindow, f64)>> {
    if height == 0 || width == 0 || height > a_hat.h || width > a_hat.w {
        return Err(GmicError::Data(format!(
            "window {height}x{width} does not fit the {}x{} map",
            a_hat.h, a_hat.w
        )));
    }
    let mut grid = a_hat.clone();
    let mut claimed = Grid::zeros(a_hat.h, a_hat.w);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let table = SumTable::new(&grid)?;
        let claimed_table = SumTable::new(&claimed)?;
        let (win, value) = table.argmax(height, width, Some(&claimed_table)).expect("window fits");
        for i in win.i..win.i + win.height {
            let row = i * grid.w + win.j..i * grid.w + win.j + win.width;
            grid.data[row.clone()].fill(0.0);
            claimed.data[row].fill(1.0);
        }
        out.push((win, value));
    }
    Ok(out)
}

/// A rectangle in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// Projects a window's top-left cell to pixels and shifts the full-size crop
/// back inside the image when it would overhang.
pub fn map_window_to_input(win: &SmWindow, s: usize, image: (usize, usize), crop: (usize, usize)) -> InputRect {
    InputRect {
        y: (win.i * s).min(image.0.saturating_sub(crop.0)),
        x: (win.j * s).min(image.1.saturating_sub(crop.1)),
        height: crop.0,
        width: crop.1,
    }
}

/// Copies `rect` out of a row-major image of width `w`.
pub fn crop<T: Copy>(image: &[T], w: usize, rect: &InputRect) -> Vec<T> {
    let mut out = Vec::with_capacity(rect.height * rect.width);
    for y in rect.y..rect.y + rect.height {
        out.extend_from_slice(&image[y * w + rect.x..y * w + rect.x + rect.width]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiProposal<T = f32> {
    /// Selection order, starting at 0.
    pub rank: usize,
    pub window: SmWindow,
    pub rect: InputRect,
    /// Criterion value at selection time.
    pub criterion: f64,
    /// Pixels of `rect`, copied from the image.
    #[serde(skip)]
    pub patch: Vec<T>,
}

/// Retrieves `k` patches of `crop` pixels from `image` (`h x w`, row-major)
/// guided by the per-class saliency grids.
pub fn retrieve_rois<T: Copy>(
    image: &[T],
    dims: (usize, usize),
    class_maps: &[Grid],
    k: usize,
    crop_dims: (usize, usize),
) -> Result<Vec<RoiProposal<T>>> {
    let (h, w) = dims;
    if crop_dims.0 > h || crop_dims.1 > w {
        return Err(GmicError::Data(format!(
            "image {h}x{w} is smaller than the {}x{} crop",
            crop_dims.0, crop_dims.1
        )));
    }
    let normalized: Vec<Grid> = class_maps.iter().map(minmax_normalize).collect();
    let a_hat = class_sum(&normalized)?;
    let s = h / a_hat.h;
    let (wh, ww) = window_dims(crop_dims, (a_hat.h, a_hat.w), dims);
    Ok(greedy_windows(&a_hat, wh, ww, k)?
        .into_iter()
        .enumerate()
        .map(|(rank, (window, criterion))| {
            let rect = map_window_to_input(&window, s, dims, crop_dims);
            RoiProposal {
                rank,
                window,
                rect,
                criterion,
                patch: crop(image, w, &rect),
            }
        })
        .collect())
}

/// `k` uniformly random full-size crop positions.
pub fn random_rects(rng: &mut impl Rng, dims: (usize, usize), crop_dims: (usize, usize), k: usize) -> Vec<InputRect> {
    (0..k)
        .map(|_| InputRect {
            y: rng.random_range(0..=dims.0 - crop_dims.0),
            x: rng.random_range(0..=dims.1 - crop_dims.1),
            height: crop_dims.0,
            width: crop_dims.1,
        })
        .collect()
}

/// Debug listing of one image's proposals.
pub fn proposals_json<T>(proposals: &[RoiProposal<T>]) -> serde_json::Value {
    serde_json::json!({ "proposals": proposals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> Grid {
        Grid::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn worked_example() {
        let a = grid(&[&[1., 0., 0., 0.], &[0., 1., 0., 0.], &[0., 0., 0., 2.], &[0., 0., 2., 0.]]);
        let at = |i, j| window_criterion(&a, &SmWindow { i, j, height: 2, width: 2 }).unwrap();
        assert_eq!(at(2, 2), 4.0);
        assert_eq!(at(0, 0), 2.0);
        let picks = greedy_windows(&a, 2, 2, 2).unwrap();
        assert_eq!((picks[0].0.i, picks[0].0.j, picks[0].1), (2, 2, 4.0));
        assert_eq!((picks[1].0.i, picks[1].0.j, picks[1].1), (0, 0, 2.0));
    }

    #[test]
    fn zero_map_follows_tie_break() {
        let picks = greedy_windows(&Grid::zeros(4, 4), 2, 2, 3).unwrap();
        let pos: Vec<_> = picks.iter().map(|(w, v)| (w.i, w.j, *v)).collect();
        assert_eq!(pos, vec![(0, 0, 0.0), (0, 2, 0.0), (2, 0, 0.0)]);
    }

    #[test]
    fn normalization_cases() {
        let n = minmax_normalize(&grid(&[&[2., 4.], &[6., 8.]]));
        assert_eq!(n.data, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(minmax_normalize(&grid(&[&[5., 5.], &[5., 5.]])).data, vec![0.0; 4]);
    }

    #[test]
    fn shift_clamp() {
        let r = map_window_to_input(&SmWindow { i: 0, j: 0, height: 2, width: 2 }, 16, (736, 480), (256, 256));
        assert_eq!((r.y, r.x), (0, 0));
        let r = map_window_to_input(&SmWindow { i: 3, j: 5, height: 2, width: 2 }, 16, (736, 480), (256, 256));
        assert_eq!((r.y, r.x), (48, 80));
        // x = 15*16 = 240 would end at 496, 16 px past the edge
        let r = map_window_to_input(&SmWindow { i: 0, j: 15, height: 2, width: 2 }, 16, (736, 480), (256, 256));
        assert_eq!((r.x, r.width), (224, 256));
    }

    #[test]
    fn window_dims_round_and_floor_at_one() {
        assert_eq!(window_dims((256, 256), (46, 30), (736, 480)), (16, 16));
        assert_eq!(window_dims((4, 4), (4, 4), (64, 64)), (1, 1));
    }
}

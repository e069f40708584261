#![allow(dead_code)]

use gmic::roi::{Grid, SmWindow};

/// Exhaustive greedy search: direct window sums, ties to the fewest claimed
/// cells, then the first row-major position.
pub fn greedy_oracle(a: &Grid, wh: usize, ww: usize, k: usize) -> Vec<(SmWindow, f64)> {
    let mut g = a.clone();
    let mut claimed = vec![false; a.h * a.w];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<(SmWindow, f64, usize)> = None;
        for i in 0..=a.h - wh {
            for j in 0..=a.w - ww {
                let mut sum = 0.0;
                let mut overlap = 0;
                for y in i..i + wh {
                    for x in j..j + ww {
                        sum += g.at(y, x);
                        overlap += claimed[y * a.w + x] as usize;
                    }
                }
                let better = match best {
                    None => true,
                    Some((_, bs, bo)) => sum > bs || (sum == bs && overlap < bo),
                };
                if better {
                    best = Some((SmWindow { i, j, height: wh, width: ww }, sum, overlap));
                }
            }
        }
        let (win, sum, _) = best.unwrap();
        for y in win.i..win.i + wh {
            for x in win.j..win.j + ww {
                g.data[y * a.w + x] = 0.0;
                claimed[y * a.w + x] = true;
            }
        }
        out.push((win, sum));
    }
    out
}

/// Fraction of positive/negative pairs ranked correctly, ties counted half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}


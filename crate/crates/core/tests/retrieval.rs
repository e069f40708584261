mod common;

use common::greedy_oracle as oracle;
use gmic::roi::{self, Grid, SmWindow};
use proptest::prelude::*;

/// Class maps on a 1/8 lattice that span exactly `[0, 1]`, so normalization is
/// the identity and every sum is exact in binary floating point.
fn lattice_maps(h: usize, w: usize, classes: usize) -> impl Strategy<Value = Vec<Grid>> {
    prop::collection::vec(prop::collection::vec(0u8..=8, h * w), classes).prop_map(move |maps| {
        maps.into_iter()
            .map(|mut v| {
                v[0] = 0;
                v[h * w - 1] = 8;
                Grid::new(h, w, v.into_iter().map(|x| x as f64 / 8.0).collect()).unwrap()
            })
            .collect()
    })
}

fn instance() -> impl Strategy<Value = (Vec<Grid>, usize, usize, usize)> {
    (2usize..=16, 2usize..=16, 1usize..=2)
        .prop_flat_map(|(h, w, c)| (lattice_maps(h, w, c), 1..=4usize.min(h), 1..=4usize.min(w), 1usize..=4))
}

fn check_against_oracle(maps: &[Grid], wh: usize, ww: usize, k: usize) {
    let (h, w) = (maps[0].h, maps[0].w);
    let s = 4;
    let image = vec![0u8; h * s * w * s];
    let got = roi::retrieve_rois(&image, (h * s, w * s), maps, k, (wh * s, ww * s)).unwrap();
    let norm: Vec<Grid> = maps.iter().map(roi::minmax_normalize).collect();
    let want = oracle(&roi::class_sum(&norm).unwrap(), wh, ww, k);
    assert_eq!(got.len(), k);
    for (p, (win, v)) in got.iter().zip(&want) {
        assert_eq!(p.window, *win);
        assert_eq!(p.criterion, *v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn greedy_matches_exhaustive_oracle((maps, wh, ww, k) in instance()) {
        check_against_oracle(&maps, wh, ww, k);
    }

    #[test]
    fn criteria_never_increase((maps, wh, ww, k) in instance()) {
        let norm: Vec<Grid> = maps.iter().map(roi::minmax_normalize).collect();
        let a = roi::class_sum(&norm).unwrap();
        let picks = roi::greedy_windows(&a, wh, ww, k).unwrap();
        for pair in picks.windows(2) {
            prop_assert!(pair[1].1 <= pair[0].1);
        }
    }

    #[test]
    fn claimed_cells_contribute_nothing((maps, wh, ww, k) in instance()) {
        let norm: Vec<Grid> = maps.iter().map(roi::minmax_normalize).collect();
        let a = roi::class_sum(&norm).unwrap();
        let picks = roi::greedy_windows(&a, wh, ww, k).unwrap();
        let mut claimed = vec![false; a.h * a.w];
        for (win, v) in &picks {
            let mut fresh = 0.0;
            for y in win.i..win.i + win.height {
                for x in win.j..win.j + win.width {
                    if !claimed[y * a.w + x] {
                        fresh += a.at(y, x);
                    }
                }
            }
            prop_assert_eq!(fresh, *v);
            for y in win.i..win.i + win.height {
                for x in win.j..win.j + win.width {
                    claimed[y * a.w + x] = true;
                }
            }
        }
    }

    #[test]
    fn rects_stay_inside_the_image(
        h in 2usize..12, w in 2usize..12, s in 1usize..6, ch in 1usize..40, cw in 1usize..40, seed in any::<u64>()
    ) {
        let (ih, iw) = (h * s, w * s);
        prop_assume!(ch <= ih && cw <= iw);
        let vals: Vec<f64> = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64).collect();
        let g = Grid::new(h, w, vals).unwrap();
        let image = vec![0u16; ih * iw];
        for p in roi::retrieve_rois(&image, (ih, iw), &[g], 3, (ch, cw)).unwrap() {
            prop_assert!(p.rect.y + p.rect.height <= ih && p.rect.x + p.rect.width <= iw);
            prop_assert_eq!(p.patch.len(), ch * cw);
        }
    }
}

#[test]
fn flat_maps_match_oracle() {
    for (h, w) in [(4, 4), (5, 7), (16, 16)] {
        for (wh, ww) in [(1, 1), (2, 2), (3, 2), (4, 4)] {
            for k in 1..=4 {
                let zero = vec![Grid::zeros(h, w)];
                check_against_oracle(&zero, wh, ww, k);
                let tied = vec![Grid::new(h, w, vec![0.3; h * w]).unwrap()];
                check_against_oracle(&tied, wh, ww, k);
            }
        }
    }
}

#[test]
fn flat_map_walks_row_major() {
    let picks = roi::greedy_windows(&Grid::zeros(4, 4), 2, 2, 3).unwrap();
    let pos: Vec<_> = picks.iter().map(|(w, _)| (w.i, w.j)).collect();
    assert_eq!(pos, [(0, 0), (0, 2), (2, 0)]);
}

#[test]
fn window_to_input_shifts_inside() {
    let win = SmWindow { i: 9, j: 9, height: 2, width: 2 };
    let r = roi::map_window_to_input(&win, 8, (80, 80), (32, 32));
    assert_eq!((r.y, r.x), (48, 48));
}

mod common;

use common::pairwise_auc;
use diffcore::{Tape, Tensor};
use gmic::aggregation::{self, pooling_m};
use gmic::evaluation::{continuous_prf, roc_auc, upsample_nearest};
use gmic::roi::Grid;
use proptest::prelude::*;

fn f_agg(values: &[f64], h: usize, w: usize, m: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64([1, 1, h, w], values).unwrap()).unwrap();
    let y = aggregation::f_agg(&mut tape, a, m).unwrap();
    tape.value(y).data()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn auc_matches_pairwise(data in prop::collection::vec((0u8..12, any::<bool>()), 2..200)) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 11.0).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn prf_matches_formula(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..300)
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mask: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
        prop_assume!(mask.contains(&1));
        let inside: f64 = a.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(v, _)| v).sum();
        let total: f64 = a.iter().sum();
        let area = mask.iter().filter(|&&m| m == 1).count() as f64;
        let (p, r) = (inside / total, inside / area);
        let f1 = 2.0 * p * r / (p + r);
        let got = continuous_prf(&a, &mask).unwrap();
        prop_assert!((got.precision - p).abs() < 1e-9);
        prop_assert!((got.recall - r).abs() < 1e-9);
        prop_assert!((got.f1 - f1).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pooling_limits_and_sandwich(
        (h, w, values, t) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0.0f64..1.0, h * w), 0.01f64..100.0)
        })
    ) {
        let n = h * w;
        let mean = values.iter().sum::<f64>() / n as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((f_agg(&values, h, w, pooling_m(100.0, n)) - mean).abs() < 1e-6);
        prop_assert_eq!(f_agg(&values, h, w, 1), max);
        let y = f_agg(&values, h, w, pooling_m(t, n));
        prop_assert!(mean - 1e-12 <= y && y <= max);
        prop_assert!((y - aggregation::f_agg_reference(&values, pooling_m(t, n))).abs() < 1e-12);
    }

    #[test]
    fn upsampling_only_copies_map_values(
        (h, w, s, values) in (1usize..8, 1usize..8, 1usize..5).prop_flat_map(|(h, w, s)| {
            (Just(h), Just(w), Just(s), prop::collection::vec(0.0f64..1.0, h * w))
        })
    ) {
        let g = Grid::new(h, w, values.clone()).unwrap();
        let up = upsample_nearest(&g, h * s, w * s);
        for y in 0..h * s {
            for x in 0..w * s {
                prop_assert_eq!(up[y * w * s + x], values[(y / s) * w + x / s]);
            }
        }
    }
}

#[test]
fn single_class_auc_is_undefined() {
    assert!(roc_auc(&[0.2, 0.4], &[false, false]).is_err());
}

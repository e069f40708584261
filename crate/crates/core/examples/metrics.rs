//! Breast-level AUC with tied scores and continuous localization scores.

use gmic::evaluation::{breast_level, continuous_prf, roc_auc, upsample_nearest};
use gmic::roi::Grid;

fn main() -> gmic::Result<()> {
    // (CC, MLO) view scores per breast and the breast label.
    let breasts = [((0.9, 0.7), true), ((0.4, 0.6), true), ((0.5, 0.5), false), ((0.2, 0.1), false), ((0.6, 0.4), false)];
    let scores: Vec<f64> = breasts.iter().map(|((cc, mlo), _)| breast_level(*cc, *mlo)).collect();
    let labels: Vec<bool> = breasts.iter().map(|(_, l)| *l).collect();
    println!("breast scores {scores:?}");
    println!("AUC {:.4}", roc_auc(&scores, &labels)?);

    // A 2x2 saliency map upsampled onto a 4x4 mask.
    let map = Grid::new(2, 2, vec![0.8, 0.1, 0.0, 0.1])?;
    let a = upsample_nearest(&map, 4, 4);
    let mut mask = vec![0u8; 16];
    for i in [0, 1, 4, 5] {
        mask[i] = 1;
    }
    let prf = continuous_prf(&a, &mask).expect("mask is nonempty");
    println!("precision {:.4} recall {:.4} f1 {:.4}", prf.precision, prf.recall, prf.f1);
    Ok(())
}

//! Top-t% pooling moves from max pooling to average pooling as t grows.

use diffcore::{Tape, Tensor};
use gmic::aggregation::{self, pooling_m};

fn main() -> gmic::Result<()> {
    let (h, w) = (6, 8);
    // A faint background with one bright 2x2 blob.
    let mut values = vec![0.05; h * w];
    for (y, x) in [(2, 3), (2, 4), (3, 3), (3, 4)] {
        values[y * w + x] = 0.9;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    println!("grid max 0.9000, grid mean {mean:.4}");
    for t in [0.1, 2.0, 5.0, 10.0, 25.0, 50.0, 100.0] {
        let m = pooling_m(t, h * w);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64([1, 1, h, w], &values)?)?;
        let y = aggregation::f_agg(&mut tape, a, m)?;
        println!("t = {t:>5}%  m = {m:>2}  f_agg = {:.4}", tape.value(y).data()[0]);
    }
    Ok(())
}

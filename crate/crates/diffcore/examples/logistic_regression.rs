//! Fits a logistic regression with the tape and Adam, then round-trips the
//! parameters through a checkpoint.

use diffcore::{Adam, Checkpoint, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> diffcore::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Two Gaussian blobs, labelled by which one a point came from.
    let n = 200;
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as f64;
        let centre = if label > 0.5 { 1.0 } else { -1.0 };
        xs.push(centre + rng.random_range(-1.0..1.0));
        xs.push(centre + rng.random_range(-1.0..1.0));
        ys.push(label);
    }
    let x = Tensor::from_f64([n, 2], &xs)?;

    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::zeros([1, 2]))?;
    let b = store.insert("b", Tensor::zeros([1]))?;
    let adam = Adam::new(0.05);
    for step in 0..=200 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (wv, bv) = (tape.param(&store, w)?, tape.param(&store, b)?);
        let logits = tape.linear(xv, wv, Some(bv))?;
        let p = tape.sigmoid(logits)?;
        let l = tape.bce(p, &ys)?;
        let l = tape.sum_all(l)?;
        let loss = tape.scale(l, 1.0 / n as f64)?;
        if step % 50 == 0 {
            println!("step {step:3}  loss {:.4}", tape.value(loss).data()[0]);
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut store, &grads)?;
    }
    println!("w = {:?}, b = {:?}", store.value(w).data(), store.value(b).data());

    let mut bytes = Vec::new();
    Checkpoint::from_store(&store, true).write(&mut bytes)?;
    let mut restored = ParamStore::<f64>::new();
    restored.insert("w", Tensor::zeros([1, 2]))?;
    restored.insert("b", Tensor::zeros([1]))?;
    Checkpoint::read(bytes.as_slice())?.restore_into(&mut restored)?;
    // Checkpoints hold f32, so the round trip is exact at that precision.
    assert_eq!(restored.value(w).cast::<f32>().data(), store.value(w).cast::<f32>().data());
    println!("checkpoint: {} bytes, restored at f32 precision", bytes.len());
    Ok(())
}

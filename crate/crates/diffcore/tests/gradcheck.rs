//! Central finite-difference checks of every differentiable op in check precision.

use diffcore::{BatchNormMode, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weights a tensor-valued output with a fixed random projection so every
/// output element contributes a distinct amount to the scalar loss.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

/// Largest relative error `|g - fd| / max(|g|, |fd|)` (norm-wise per tensor)
/// between backward() and central differences over every parameter element.
fn max_rel_err<F>(store: &ParamStore<f64>, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss).unwrap();

    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        t.value(l).data()[0]
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let mut fd = vec![0.0; n];
        let mut s = store.clone();
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = store.value(id).data()[i];
            s.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&s);
            s.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&s);
            s.value_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let analytic = grads
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let diff: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nf).max(1e-12);
        worst = worst.max(diff / denom);
    }
    worst
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stride, pad, k) = [(1, 1, 3), (2, 1, 3), (2, 2, 5), (1, 0, 1)][seed as usize % 4];
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, &[2, 2, 5, 4], -1.0, 1.0)).unwrap();
        let w = store.insert("w", random(&mut rng, &[3, 2, k, k], -1.0, 1.0)).unwrap();
        let probe_shape = {
            let mut t = Tape::new();
            let xv = t.param(&store, x).unwrap();
            let wv = t.param(&store, w).unwrap();
            let y = t.conv2d(xv, wv, stride, pad).unwrap();
            t.shape(y).to_vec()
        };
        let proj = random(&mut rng, &probe_shape, -1.0, 1.0);
        let err = max_rel_err(&store, |t, s| {
            let xv = t.param(s, x).unwrap();
            let wv = t.param(s, w).unwrap();
            let y = t.conv2d(xv, wv, stride, pad).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn conv2d_sum_gradient_on_2x4x4_input() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0)).unwrap();
        let w = store.insert("w", random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0)).unwrap();
        let err = max_rel_err(&store, |t, s| {
            let xv = t.param(s, x).unwrap();
            let wv = t.param(s, w).unwrap();
            let y = t.conv2d(xv, wv, 1, 1).unwrap();
            t.sum_all(y).unwrap()
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
        let w = store.insert("w", random(&mut rng, &[5, 4], -1.0, 1.0)).unwrap();
        let b = store.insert("b", random(&mut rng, &[5], -1.0, 1.0)).unwrap();
        let proj = random(&mut rng, &[3, 5], -1.0, 1.0);
        let err = max_rel_err(&store, |t, s| {
            let y = {
                let xv = t.param(s, x).unwrap();
                let wv = t.param(s, w).unwrap();
                let bv = t.param(s, b).unwrap();
                t.linear(xv, wv, Some(bv)).unwrap()
            };
            project(t, y, &proj)
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        // Keep relu test points away from the kink at zero.
        let mut a = random(&mut rng, &[2, 3, 2, 2], 0.05, 1.5);
        for v in a.data_mut() {
            if rng.random_bool(0.5) {
                *v = -*v;
            }
        }
        let a = store.insert("a", a).unwrap();
        let b = store.insert("b", random(&mut rng, &[2, 3, 2, 2], -1.5, 1.5)).unwrap();
        let proj = random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let err = max_rel_err(&store, |t, s| {
            let av = t.param(s, a).unwrap();
            let bv = t.param(s, b).unwrap();
            let th = t.tanh(av).unwrap();
            let sg = t.sigmoid(bv).unwrap();
            let r = t.relu(av).unwrap();
            let m = t.mul(th, sg).unwrap();
            let sc = t.scale(r, 0.7).unwrap();
            let y = t.add(m, sc).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn tanh_gradient_alone() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(350 + seed);
        let mut store = ParamStore::new();
        let a = store.insert("a", random(&mut rng, &[4, 5], -2.0, 2.0)).unwrap();
        let proj = random(&mut rng, &[4, 5], -1.0, 1.0);
        let err = max_rel_err(&store, |t, s| {
            let av = t.param(s, a).unwrap();
            let y = t.tanh(av).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, &[2, 3, 3, 2], -2.0, 2.0)).unwrap();
        let g = store.insert("g", random(&mut rng, &[3], 0.5, 1.5)).unwrap();
        let b = store.insert("b", random(&mut rng, &[3], -0.5, 0.5)).unwrap();
        let proj = random(&mut rng, &[2, 3, 3, 2], -1.0, 1.0);
        let err = max_rel_err(&store, |t, s| {
            let xv = t.param(s, x).unwrap();
            let gv = t.param(s, g).unwrap();
            let bv = t.param(s, b).unwrap();
            let (y, _) = t.batch_norm2d(xv, gv, bv, BatchNormMode::Train).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-5, "seed {seed}: train-mode rel err {err}");

        let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
        let err = max_rel_err(&store, |t, s| {
            let xv = t.param(s, x).unwrap();
            let gv = t.param(s, g).unwrap();
            let bv = t.param(s, b).unwrap();
            let mode = BatchNormMode::Eval { mean: &mean, var: &var };
            let (y, _) = t.batch_norm2d(xv, gv, bv, mode).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-5, "seed {seed}: eval-mode rel err {err}");
    }
}

#[test]
fn pooling_and_reduction_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, &[2, 2, 4, 3], 0.05, 0.95)).unwrap();
        let proj = random(&mut rng, &[2, 2], -1.0, 1.0);
        let beta = [0.5, 1.0, 2.3][seed as usize % 3];
        let err = max_rel_err(&store, |t, s| {
            let xv = t.param(s, x).unwrap();
            let top = t.top_k_mean(xv, 3).unwrap();
            let gap = t.global_avg_pool(xv).unwrap();
            let pw = t.pow_sum(xv, beta).unwrap();
            let a = t.add(top, gap).unwrap();
            let y = t.add(a, pw).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn attention_path_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (bags, k, l) = (2, 3, 4);
        let mut store = ParamStore::new();
        let logits = store.insert("logits", random(&mut rng, &[bags * k, 1], -2.0, 2.0)).unwrap();
        let inst = store.insert("inst", random(&mut rng, &[bags * k, l], -1.0, 1.0)).unwrap();
        let w = store.insert("w", random(&mut rng, &[2, l], -1.0, 1.0)).unwrap();
        let targets = [1.0, 0.0, 0.0, 1.0];
        let err = max_rel_err(&store, |t, s| {
            let lv = t.param(s, logits).unwrap();
            let lv = t.reshape(lv, &[bags, k]).unwrap();
            let a = t.softmax(lv).unwrap();
            let hv = t.param(s, inst).unwrap();
            let z = t.bag_weighted_sum(a, hv).unwrap();
            let wv = t.param(s, w).unwrap();
            let y = t.linear(z, wv, None).unwrap();
            let p = t.sigmoid(y).unwrap();
            let l = t.bce(p, &targets).unwrap();
            t.sum_all(l).unwrap()
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn bias_channels_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0)).unwrap();
        let b = store.insert("b", random(&mut rng, &[3], -1.0, 1.0)).unwrap();
        let proj = random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let err = max_rel_err(&store, |t, s| {
            let xv = t.param(s, x).unwrap();
            let bv = t.param(s, b).unwrap();
            let y = t.bias_channels(xv, bv).unwrap();
            project(t, y, &proj)
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

/// Direct quadruple loop, independent of im2col/gemm.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, ci, h, w) = x.dims4("oracle").unwrap();
    let (co, _, kh, kw) = k.dims4("oracle").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let iy = (oy * stride + a) as isize - pad as isize;
                                let ix = (ox * stride + bb) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * ci + c) * kh + a) * kw + bb];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (stride, pad, k, h, w) in [(1, 1, 3, 5, 6), (2, 2, 5, 9, 8), (2, 0, 3, 7, 7), (1, 0, 1, 4, 3)] {
        let x = random(&mut rng, &[2, 3, h, w], -1.0, 1.0);
        let kern = random(&mut rng, &[4, 3, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let kv = tape.constant(kern.clone()).unwrap();
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let expected = conv_oracle(&x, &kern, stride, pad);
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_of_centered_delta_is_flipped_kernel() {
    let mut x = Tensor::<f64>::zeros([1, 1, 3, 3]);
    x.data_mut()[4] = 1.0;
    let kern: Vec<f64> = (1..=9).map(f64::from).collect();
    let kt = Tensor::new([1, 1, 3, 3], kern.clone()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let kv = tape.constant(kt.clone()).unwrap();
    let y = tape.conv2d(xv, kv, 1, 1).unwrap();
    let flipped: Vec<f64> = kern.iter().rev().copied().collect();
    assert_eq!(tape.value(y).data(), flipped.as_slice());
    assert_eq!(tape.value(y).data(), conv_oracle(&x, &kt, 1, 1).as_slice());
}

#[test]
fn conv2d_wide_images_split_into_bands() {
    // w_out > 2048 forces one output row per im2col band.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&mut rng, &[1, 1, 3, 2100], -1.0, 1.0)).unwrap();
    let w = store.insert("w", random(&mut rng, &[2, 1, 3, 3], -1.0, 1.0)).unwrap();
    let proj = random(&mut rng, &[1, 2, 3, 2100], -1.0, 1.0);
    let err = max_rel_err(&store, |t, s| {
        let xv = t.param(s, x).unwrap();
        let wv = t.param(s, w).unwrap();
        let y = t.conv2d(xv, wv, 1, 1).unwrap();
        project(t, y, &proj)
    });
    assert!(err < 1e-6, "rel err {err}");

    let xt = random(&mut rng, &[1, 2, 40, 130], -1.0, 1.0);
    let kt = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(xt.clone()).unwrap();
    let kv = tape.constant(kt.clone()).unwrap();
    let y = tape.conv2d(xv, kv, 1, 1).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(conv_oracle(&xt, &kt, 1, 1)) {
        assert!((a - b).abs() < 1e-12);
    }
}

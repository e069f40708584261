use diffcore::{ParamStore, Tensor};
use gmic::config::RunConfig;
use gmic::mil::{self, GatedAttention, MilHead};
use gmic::nn::{Builder, Mode, Session};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Heads {
    attention: GatedAttention,
    head: MilHead,
    store: ParamStore<f64>,
}

fn heads(seed: u64, l: usize, bias: bool) -> Heads {
    let mut cfg = RunConfig::toy();
    cfg.mil.embedding_dim = l;
    cfg.mil.attention_dim = 5;
    cfg.mil.attention_bias = bias;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let attention = GatedAttention::new(&mut b, &cfg.mil).unwrap();
    let head = MilHead::new(&mut b, &cfg.model, &cfg.mil).unwrap();
    Heads {
        attention,
        head,
        store: store.cast(),
    }
}

/// `(alpha, z, y_mil)` for a single bag.
fn run(h: &Heads, bag: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, l) = (bag.len(), bag[0].len());
    let mut s = Session::new(&h.store, Mode::Eval);
    let e = s.tape.constant(Tensor::from_f64([k, l], &bag.concat()).unwrap()).unwrap();
    let (alpha, z) = h.attention.forward(&mut s, e, k).unwrap();
    let y = h.head.forward(&mut s, z).unwrap();
    let get = |v| s.tape.value(v).data().to_vec();
    (get(alpha), get(z), get(y))
}

fn bag() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, u64)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(k, l)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, l), k),
            Just((0..k).collect::<Vec<_>>()).prop_shuffle(),
            any::<u64>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_pooling_properties((instances, perm, seed) in bag()) {
        let h = heads(seed, instances[0].len(), seed % 2 == 0);
        let (alpha, z, y) = run(&h, &instances);

        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        for (d, &zd) in z.iter().enumerate() {
            let col = instances.iter().map(|r| r[d]);
            let (lo, hi) = col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            prop_assert!(zd >= lo - 1e-12 && zd <= hi + 1e-12);
            let combo: f64 = alpha.iter().zip(col).map(|(a, v)| a * v).sum();
            prop_assert!((combo - zd).abs() < 1e-12);
        }

        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| instances[i].clone()).collect();
        let (alpha_p, z_p, y_p) = run(&h, &shuffled);
        for (a, b) in z.iter().zip(&z_p) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in y.iter().zip(&y_p) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for (pos, &i) in perm.iter().enumerate() {
            prop_assert!((alpha_p[pos] - alpha[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_scalar_reference((instances, _perm, seed) in bag()) {
        let h = heads(seed, instances[0].len(), false);
        let (alpha, z, _) = run(&h, &instances);
        let rows = |id, r: usize, c: usize| -> Vec<Vec<f64>> {
            h.store.value(id).data().chunks(c).take(r).map(<[f64]>::to_vec).collect()
        };
        let l = instances[0].len();
        let v = rows(h.attention.v, 5, l);
        let u = rows(h.attention.u, 5, l);
        let w = h.store.value(h.attention.w).data().to_vec();
        let (ra, rz) = mil::gated_attention_reference(&instances, &v, &u, &w);
        for (a, b) in alpha.iter().zip(&ra) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in z.iter().zip(&rz) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_weights_average_the_bag() {
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store, Mode::Eval);
    let e = s.tape.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap()).unwrap();
    let (alpha, z) = mil::uniform_attention(&mut s, e, 2).unwrap();
    assert_eq!(s.tape.value(alpha).data(), &[0.5, 0.5]);
    assert_eq!(s.tape.value(z).data(), &[2.0, 4.0]);
}

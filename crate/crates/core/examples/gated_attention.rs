//! Attention pooling over a bag of patch embeddings, compared with uniform
//! weights and checked against the scalar reference.

use diffcore::{ParamStore, Tensor};
use gmic::config::RunConfig;
use gmic::mil::{self, GatedAttention};
use gmic::nn::{Builder, Mode, Session};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gmic::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.mil.embedding_dim = 4;
    cfg.mil.attention_dim = 3;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let att = GatedAttention::new(&mut Builder::new(&mut store, &mut rng), &cfg.mil)?;
    let store: ParamStore<f64> = store.cast();

    let bag = vec![
        vec![0.1, -0.2, 0.0, 0.3],
        vec![2.0, 1.5, -1.0, 0.5],
        vec![-0.3, 0.1, 0.2, -0.1],
    ];
    let mut s = Session::new(&store, Mode::Eval);
    let e = s.tape.constant(Tensor::from_f64([3, 4], &bag.concat())?)?;
    let (alpha, z) = att.forward(&mut s, e, 3)?;
    let (_, z_uniform) = mil::uniform_attention(&mut s, e, 3)?;
    println!("alpha     = {:.4?}", s.tape.value(alpha).data());
    println!("z (gated) = {:.4?}", s.tape.value(z).data());
    println!("z (mean)  = {:.4?}", s.tape.value(z_uniform).data());

    let rows = |id, c: usize| store.value(id).data().chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let (ra, _) = mil::gated_attention_reference(&bag, &rows(att.v, 4), &rows(att.u, 4), store.value(att.w).data());
    println!("reference = {ra:.4?}");
    Ok(())
}

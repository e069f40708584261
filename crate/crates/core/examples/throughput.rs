//! Times view rendering, one training step and one evaluation pass at desk scale.

use std::time::Instant;

use diffcore::Adam;
use gmic::dataset::{self, ExamSource, ProceduralSource, Split};
use gmic::evaluation::{self, LoadedModel};
use gmic::synth::Side;
use gmic::training;
use gmic::{Gmic, RunConfig};

fn main() -> gmic::Result<()> {
    let cfg = RunConfig::desk();
    let source = ProceduralSource::new(cfg.data.synth.clone());
    let records: Vec<_> = source.manifest().split(Split::Train).take(4).cloned().collect();
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);

    let t = Instant::now();
    let batch: Vec<_> = records
        .iter()
        .take(cfg.training.batch_size)
        .map(|r| dataset::load_breast(&source, r, Side::Left, h, w, false, false))
        .collect::<gmic::Result<_>>()?;
    let per_view = t.elapsed().as_secs_f64() / (2 * batch.len()) as f64;
    println!("render+normalize: {:.1} ms per view", per_view * 1e3);

    let (model, mut store) = Gmic::new(&cfg, 0)?;
    println!("trainable parameters: {}", store.num_trainable());
    let adam = Adam::new(cfg.training.learning_rate);
    training::train_step(&model, &mut store, &adam, &batch)?;
    let t = Instant::now();
    let steps: usize = std::env::var("STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(3);
    for _ in 0..steps {
        training::train_step(&model, &mut store, &adam, &batch)?;
    }
    let per_image = t.elapsed().as_secs_f64() / (steps * 2 * batch.len()) as f64;
    println!("train step: {:.1} ms per image", per_image * 1e3);

    let loaded = [LoadedModel { model, store }];
    let t = Instant::now();
    for b in &batch {
        evaluation::predict_breast(&loaded, b, cfg.num_classes(), Some(1))?;
    }
    let per_image = t.elapsed().as_secs_f64() / (2 * batch.len()) as f64;
    println!("evaluation (all variants): {:.1} ms per image", per_image * 1e3);
    Ok(())
}

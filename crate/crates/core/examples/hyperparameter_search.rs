//! Log-uniform hyperparameter sampling, then a two-model search on the toy corpus.

use gmic::dataset::ProceduralSource;
use gmic::training::{self, sample_hyperparams};
use gmic::RunConfig;

fn main() -> gmic::Result<()> {
    let mut cfg = RunConfig::toy();
    for i in 0..5 {
        let hp = sample_hyperparams(&cfg, &cfg.search, i);
        println!(
            "draw {i}: lr {:.2e} lambda {:.2e} beta {:.3} t {:.3}%",
            hp.learning_rate, hp.lambda, hp.beta, hp.t_percent
        );
    }

    cfg.search.n_models = 2;
    cfg.search.top_k = 1;
    let out = tempfile_dir()?;
    let source = ProceduralSource::new(cfg.data.synth.clone());
    let summary = training::run_search(&cfg, &source, &out)?;
    for run in &summary.runs {
        println!("model {} best epoch {} val AUC {:?}", run.index, run.best_epoch, run.best_val_auc);
    }
    println!("ensemble: {:?} under {}", summary.top_k, out.display());
    Ok(())
}

fn tempfile_dir() -> gmic::Result<std::path::PathBuf> {
    let p = std::env::temp_dir().join("gmic_search_example");
    std::fs::create_dir_all(&p).map_err(|e| gmic::GmicError::io(&p, e))?;
    Ok(p)
}

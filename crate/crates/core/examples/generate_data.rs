//! Renders a small synthetic screening corpus to disk and summarizes it.
//!
//! ```text
//! cargo run --release --example generate_data -- [out_dir]
//! ```

use std::path::PathBuf;

use gmic::dataset::{self, Split};
use gmic::synth::{self, SynthSpec, CLASS_NAMES};

fn main() -> gmic::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/toy_data".into()));
    let spec = SynthSpec::toy();
    let manifest = dataset::generate_dataset(&spec, &out)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        let exams: Vec<_> = manifest.split(split).collect();
        let positive = exams.iter().filter(|e| e.is_positive()).count();
        println!("{:>10}: {} exams, {positive} with a finding", split.name(), exams.len());
    }

    // Lesion sizes at the default resolution, as a fraction of the image.
    let full = SynthSpec::default();
    let area = (full.image_height * full.image_width) as f64;
    let mut counts = [0usize; 2];
    let mut fractions = Vec::new();
    for index in 0..200 {
        for side in synth::plan_exam(&full, index).lesions {
            for l in side {
                counts[l.class] += 1;
                fractions.push(l.area() / area);
            }
        }
    }
    let lo = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fractions.iter().copied().fold(0.0, f64::max);
    println!(
        "default spec, first 200 exams: {} {} and {} {} lesions covering {:.2}%..{:.2}% of a view",
        counts[0],
        CLASS_NAMES[0],
        counts[1],
        CLASS_NAMES[1],
        100.0 * lo,
        100.0 * hi
    );
    println!("wrote {}", out.join(dataset::MANIFEST_FILE).display());
    Ok(())
}

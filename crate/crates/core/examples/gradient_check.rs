//! Central-difference check of every SAR parameter over a two-block utterance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarstream::blocking::BlockSpec;
use sarstream::grad::finite_diff_check;
use sarstream::labels::{normalize, FeatureMatrix, FrameAlignment, Transcript, Vocab};
use sarstream::model::{compute_loss, LossMode, ModelConfig, SarModel};

fn main() -> sarstream::Result<()> {
    let vocab = Vocab::synthetic(3);
    let cfg = ModelConfig {
        d_model: 8,
        d_ctx: 8,
        d_lm: 8,
        d_ff: 8,
        ..ModelConfig::toy(vocab.len(), 4)
    };
    let mut model = SarModel::new(cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = FeatureMatrix::new(
        "g",
        12,
        4,
        (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
        0.04,
    )?;
    let a = FrameAlignment::new("g", vec![1, 1, 0, 2, 2, 3, 0, 3, 1, 1, 0, 2], &vocab)?;
    let y = Transcript::new("g", normalize(&a.labels), &vocab)?;
    let spec = BlockSpec::new(10, 6, 2, 2)?;

    let shell = model.clone();
    let report = finite_diff_check(
        &mut model.params,
        |g, store| {
            let mut m = shell.clone();
            m.params = store.clone();
            let pass = m.forward_graph(g, &x, Some(&a), &spec)?;
            compute_loss(g, &pass, Some(&a), &y, LossMode::CeInterCtc, 0.3)
        },
        1e-5,
        1e-4,
    )?;
    for (name, err) in &report.entries {
        println!("{name:<24} {err:.2e}");
    }
    println!(
        "max relative error {:.2e}, passed: {}",
        report.max_error(),
        report.passed()
    );
    Ok(())
}

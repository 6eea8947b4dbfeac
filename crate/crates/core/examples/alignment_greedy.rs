//! Decoders on posteriors where a token straddles a block edge.
//!
//! Teacher (one-hot) posteriors stand in for a model, so the only
//! difference between the outputs is how each decoder joins blocks.

use sarstream::blocking::BlockSpec;
use sarstream::decode::{decode, DecoderKind, TeacherScorer};
use sarstream::eval::CostModel;
use sarstream::labels::{FeatureMatrix, FrameAlignment, Vocab};

fn main() -> sarstream::Result<()> {
    let vocab = Vocab::new(&["A", "B", "C"])?;
    // A A _ C | C _ B B | _ _ _ _  with 4-frame windows; C crosses the first edge.
    let labels = vec![1, 1, 0, 3, 3, 0, 2, 2, 0, 0, 0, 0];
    let alignment = FrameAlignment::new("demo", labels, &vocab)?;
    let x = FeatureMatrix::new("demo", 12, 1, vec![0.0; 12], 0.04)?;
    let teacher = TeacherScorer::from_alignment(&alignment, vocab.len());

    for (name, spec) in [
        ("no lookahead", BlockSpec::new(4, 4, 0, 0)?),
        ("2-frame lookahead", BlockSpec::new(6, 4, 0, 2)?),
    ] {
        println!("{name}:");
        for kind in DecoderKind::ALL {
            let (y, log) = decode(kind, &teacher, &x, &spec, CostModel::synthetic(1e-3)?)?;
            let text: Vec<&str> = y.tokens.iter().map(|&t| vocab.symbol(t).unwrap()).collect();
            println!(
                "  {:<8} {:<12} last emission at {:.3}s",
                kind.name(),
                text.join(" "),
                log.last_emit_s()
            );
        }
    }
    Ok(())
}

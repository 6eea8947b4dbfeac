//! CTC loss, gradient and Viterbi forced alignment on a hand-built posterior.

use sarstream::ctc::{best_path, ctc_forced_align, ctc_loss, path_log_prob};
use sarstream::labels::{normalize, PosteriorMatrix, Transcript, Vocab};

fn main() -> sarstream::Result<()> {
    let vocab = Vocab::new(&["a", "b"])?;
    // 5 frames over {blank, a, b}; rows are unnormalized scores.
    let logits = vec![
        0.1, 2.0, 0.0, //
        0.2, 1.5, 0.1, //
        1.8, 0.3, 0.2, //
        0.0, 0.1, 2.2, //
        0.4, 0.0, 1.9,
    ];
    let post = PosteriorMatrix::from_logits(5, vocab.len(), logits)?;
    let y = Transcript::new("demo", vec![1, 2], &vocab)?;

    let loss = ctc_loss(&post, &y.tokens)?;
    println!("-log P(a b | x) = {:.6}", loss.loss);
    println!(
        "d loss / d log p(frame 0) = {:?}",
        &loss.grad[..vocab.len()]
    );

    let aligned = ctc_forced_align(&post, &y)?;
    let labels: Vec<&str> = aligned
        .labels
        .iter()
        .map(|&t| vocab.symbol(t).unwrap_or("?"))
        .collect();
    println!("forced alignment: {labels:?}");
    println!(
        "path log prob:    {:.6}",
        path_log_prob(&post, &aligned.labels)
    );

    let greedy = best_path(&post);
    println!("greedy path {:?} -> {:?}", greedy, normalize(&greedy));
    Ok(())
}

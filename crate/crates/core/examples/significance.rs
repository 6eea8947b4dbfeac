//! Matched-pair tests between two hypothetical systems.

use sarstream::eval::{binomial_two_sided, matched_pair_test, wer_report};
use sarstream::labels::Transcript;

fn t(id: usize, tokens: &[usize]) -> Transcript {
    Transcript {
        utt_id: format!("u{id:02}"),
        tokens: tokens.to_vec(),
    }
}

fn main() -> sarstream::Result<()> {
    let refs: Vec<_> = (0..30).map(|i| t(i, &[1, 2, 3, 4])).collect();
    // P drops a token on every third utterance, Q on every tenth.
    let p: Vec<_> = (0..30)
        .map(|i| {
            t(
                i,
                if i % 3 == 0 {
                    &[1, 2, 3]
                } else {
                    &[1, 2, 3, 4]
                },
            )
        })
        .collect();
    let q: Vec<_> = (0..30)
        .map(|i| {
            t(
                i,
                if i % 10 == 0 {
                    &[1, 2, 4]
                } else {
                    &[1, 2, 3, 4]
                },
            )
        })
        .collect();
    let (rp, rq) = (wer_report(&refs, &p)?, wer_report(&refs, &q)?);
    println!("P: {rp}\nQ: {rq}");
    let test = matched_pair_test(&rp, &rq)?;
    println!(
        "sign test: P better on {}, Q better on {}, p = {:.4}",
        test.p_better, test.q_better, test.sign_p
    );
    println!("McNemar p = {:.4}", test.mcnemar_p);
    println!("20 of 20 wins: p = {:e}", binomial_two_sided(20, 20));
    Ok(())
}

//! CTC loss, Viterbi forced alignment and best-path decoding over a
//! [`PosteriorMatrix`].
//!
//! Everything runs in log space over the expanded label sequence
//! `∅ y1 ∅ y2 … ∅`. Impossible states carry [`LOG_ZERO`] rather than `-inf`
//! so that sums of sentinels stay finite and never produce NaN.

use crate::error::{Error, Result};
use crate::labels::{normalize, FrameAlignment, PosteriorMatrix, TokenId, Transcript, BLANK};

pub const LOG_ZERO: f64 = -1e30;

fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b;
    }
    if b <= LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `∅ y1 ∅ y2 … yO ∅`, length `2O + 1`.
pub fn expand_labels(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(2 * tokens.len() + 1);
    out.push(BLANK);
    for &t in tokens {
        out.push(t);
        out.push(BLANK);
    }
    out
}

/// Fewest frames that can carry `tokens`: one per token plus a blank
/// between each adjacent repeat.
pub fn min_frames(tokens: &[TokenId]) -> usize {
    tokens.len() + tokens.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(post: &PosteriorMatrix, tokens: &[TokenId]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t == BLANK || t >= post.vocab()) {
        return Err(Error::input(format!(
            "transcript token {t} is not a real token"
        )));
    }
    let required = min_frames(tokens);
    if required > post.frames() {
        return Err(Error::TranscriptTooLong {
            tokens: tokens.len(),
            required,
            frames: post.frames(),
        });
    }
    Ok(())
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
fn can_skip(ext: &[TokenId], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

#[derive(Debug, Clone)]
pub struct CtcLoss {
    /// `-log P(y | X)`.
    pub loss: f64,
    /// d loss / d log_probs, `T x |V|` row-major; equals minus the state
    /// occupancy of each label at each frame.
    pub grad: Vec<f64>,
}

/// Negative log-likelihood of `tokens` summed over all valid alignments.
pub fn ctc_loss(post: &PosteriorMatrix, tokens: &[TokenId]) -> Result<CtcLoss> {
    check(post, tokens)?;
    let ext = expand_labels(tokens);
    let (t_len, s_len, v) = (post.frames(), ext.len(), post.vocab());
    let lp = |t: usize, s: usize| post.row(t)[ext[s]];

    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a <= LOG_ZERO {
                LOG_ZERO
            } else {
                a + lp(t, s)
            };
        }
    }

    let mut beta = vec![LOG_ZERO; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s];
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                b = log_add(b, beta[next + s + 2]);
            }
            beta[t * s_len + s] = if b <= LOG_ZERO {
                LOG_ZERO
            } else {
                b + lp(t, s)
            };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p <= LOG_ZERO / 2.0 {
        return Err(Error::Numerical("transcript has zero probability".into()));
    }

    // alpha·beta double counts the emission at t, so divide it out once.
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut occ = vec![LOG_ZERO; v];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if alpha[t * s_len + s] <= LOG_ZERO || beta[t * s_len + s] <= LOG_ZERO {
                continue;
            }
            occ[ext[s]] = log_add(occ[ext[s]], ab - lp(t, s));
        }
        for k in 0..v {
            if occ[k] > LOG_ZERO {
                grad[t * v + k] = -(occ[k] - log_p).exp();
            }
        }
    }
    Ok(CtcLoss { loss: -log_p, grad })
}

/// Most probable alignment of `tokens` and its log path probability.
///
/// On ties a path prefers staying in its lattice state over advancing one
/// state, and advancing one state over skipping a blank.
pub fn viterbi_align(post: &PosteriorMatrix, tokens: &[TokenId]) -> Result<(Vec<TokenId>, f64)> {
    check(post, tokens)?;
    let ext = expand_labels(tokens);
    let (t_len, s_len) = (post.frames(), ext.len());
    let lp = |t: usize, s: usize| post.row(t)[ext[s]];

    let mut score = vec![LOG_ZERO; t_len * s_len];
    let mut back = vec![0u8; t_len * s_len];
    score[0] = lp(0, 0);
    if s_len > 1 {
        score[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut best = score[prev + s];
            let mut step = 0u8;
            if s >= 1 && score[prev + s - 1] > best {
                best = score[prev + s - 1];
                step = 1;
            }
            if can_skip(&ext, s) && score[prev + s - 2] > best {
                best = score[prev + s - 2];
                step = 2;
            }
            if best > LOG_ZERO {
                score[t * s_len + s] = best + lp(t, s);
                back[t * s_len + s] = step;
            }
        }
    }

    let last = (t_len - 1) * s_len;
    let mut s = s_len - 1;
    if s_len > 1 && score[last + s_len - 2] >= score[last + s_len - 1] {
        s = s_len - 2;
    }
    let total = score[last + s];
    if total <= LOG_ZERO / 2.0 {
        return Err(Error::Numerical(
            "no alignment with nonzero probability".into(),
        ));
    }
    let mut path = vec![BLANK; t_len];
    for t in (0..t_len).rev() {
        path[t] = ext[s];
        s -= back[t * s_len + s] as usize;
    }
    debug_assert_eq!(normalize(&path), tokens);
    Ok((path, total))
}

/// Viterbi forced alignment of a transcript.
pub fn ctc_forced_align(post: &PosteriorMatrix, y: &Transcript) -> Result<FrameAlignment> {
    let (labels, _) = viterbi_align(post, &y.tokens)?;
    Ok(FrameAlignment {
        utt_id: y.utt_id.clone(),
        labels,
    })
}

/// Per-frame argmax; ties go to the lowest id.
pub fn best_path(post: &PosteriorMatrix) -> Vec<TokenId> {
    (0..post.frames()).map(|t| argmax(post.row(t))).collect()
}

pub(crate) fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Log probability of one specific frame path.
pub fn path_log_prob(post: &PosteriorMatrix, path: &[TokenId]) -> f64 {
    path.iter().enumerate().map(|(t, &k)| post.row(t)[k]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::log_sum_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: TokenId = 1;
    const B: TokenId = 2;

    fn random_post(rng: &mut ChaCha8Rng, t: usize, v: usize) -> PosteriorMatrix {
        let logits = (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        PosteriorMatrix::from_logits(t, v, logits).unwrap()
    }

    /// Every label path of length T over V symbols.
    fn all_paths(t: usize, v: usize) -> Vec<Vec<TokenId>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..v).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn enumerate(post: &PosteriorMatrix, y: &[TokenId]) -> (f64, f64) {
        let scores: Vec<f64> = all_paths(post.frames(), post.vocab())
            .into_iter()
            .filter(|p| normalize(p) == y)
            .map(|p| path_log_prob(post, &p))
            .collect();
        (
            log_sum_exp(&scores),
            scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    #[test]
    fn single_path_cases() {
        let post = PosteriorMatrix::from_logits(1, 3, vec![0.3, 1.1, -0.4]).unwrap();
        let l = ctc_loss(&post, &[A]).unwrap();
        assert!((l.loss + post.row(0)[A]).abs() < 1e-12);

        let post = PosteriorMatrix::from_logits(2, 3, vec![0.3, 1.1, -0.4, 0.0, 0.2, 0.9]).unwrap();
        let l = ctc_loss(&post, &[]).unwrap();
        assert!((l.loss + post.row(0)[0] + post.row(1)[0]).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let post = random_post(&mut rng, 4, 4);
        let (sum, _) = enumerate(&post, &[A, B]);
        let l = ctc_loss(&post, &[A, B]).unwrap();
        assert!((l.loss + sum).abs() < 1e-10, "{} vs {}", l.loss, -sum);
    }

    #[test]
    fn forced_alignment_matches_enumerated_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let post = random_post(&mut rng, 5, 4);
        let (_, best) = enumerate(&post, &[A, B]);
        let (path, score) = viterbi_align(&post, &[A, B]).unwrap();
        assert_eq!(normalize(&path), vec![A, B]);
        assert!((score - best).abs() < 1e-12);
        assert!((path_log_prob(&post, &path) - score).abs() < 1e-12);
    }

    #[test]
    fn forced_alignment_examples() {
        // A dominates both frames.
        let post = PosteriorMatrix::from_logits(2, 3, vec![0.0, 5.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        assert_eq!(viterbi_align(&post, &[A]).unwrap().0, vec![A, A]);

        let post = PosteriorMatrix::from_logits(3, 3, vec![0.0; 9]).unwrap();
        assert_eq!(viterbi_align(&post, &[A, A]).unwrap().0, vec![A, BLANK, A]);
    }

    #[test]
    fn uniform_ties_prefer_longer_runs() {
        let post = PosteriorMatrix::from_logits(4, 3, vec![0.0; 12]).unwrap();
        assert_eq!(viterbi_align(&post, &[A]).unwrap().0, vec![A, A, A, A]);
    }

    #[test]
    fn unalignable_transcripts() {
        let post = PosteriorMatrix::from_logits(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            ctc_loss(&post, &[A, A]),
            Err(Error::TranscriptTooLong { required: 3, .. })
        ));
        assert!(viterbi_align(&post, &[A, B, A]).is_err());
        assert!(ctc_loss(&post, &[BLANK]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let post = random_post(&mut rng, 6, 4);
        let y = [A, 3, A];
        let l = ctc_loss(&post, &y).unwrap();
        let h = 1e-6;
        for i in 0..post.log_probs().len() {
            let bump = |d: f64| {
                let mut lp = post.log_probs().to_vec();
                lp[i] += d;
                // log-probs are free inputs here, no renormalization
                raw_loss(&lp, 6, 4, &y)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            assert!(
                (numeric - l.grad[i]).abs() < 1e-6,
                "{i}: {numeric} vs {}",
                l.grad[i]
            );
        }
    }

    /// Enumeration-based loss over unnormalized log-scores.
    fn raw_loss(lp: &[f64], t: usize, v: usize, y: &[TokenId]) -> f64 {
        let scores: Vec<f64> = all_paths(t, v)
            .into_iter()
            .filter(|p| normalize(p) == y)
            .map(|p| p.iter().enumerate().map(|(i, &k)| lp[i * v + k]).sum())
            .collect();
        -log_sum_exp(&scores)
    }

    #[test]
    fn best_path_examples() {
        let post = PosteriorMatrix::from_logits(2, 4, vec![0.0; 8]).unwrap();
        assert_eq!(best_path(&post), vec![BLANK, BLANK]);
        let post = PosteriorMatrix::one_hot(&[2, 0, 3], 4);
        assert_eq!(best_path(&post), vec![2, 0, 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let post = random_post(&mut rng, 6, 4);
        let scan: Vec<TokenId> = (0..6)
            .map(|t| {
                let row = post.row(t);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter().position(|&x| x == m).unwrap()
            })
            .collect();
        assert_eq!(best_path(&post), scan);
    }
}

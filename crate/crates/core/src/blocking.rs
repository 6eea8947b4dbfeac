//! Overlapping block geometry and central prediction windows.
//!
//! Frame ranges here are 0-based and half-open. Block `b` (1-based) covers
//! frames `I..min(I + l_block, T)` with `I = (b - 1) * l_hop`, and predicts
//! frames `I + n_l .. I + n_l + l_hop`. The first window is stretched back to
//! frame 0 and the last one forward to `T`, so the windows tile the utterance.

use std::fmt;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub l_block: usize,
    pub l_hop: usize,
    pub n_l: usize,
    pub n_r: usize,
}

impl BlockSpec {
    pub const DEFAULT: BlockSpec = BlockSpec {
        l_block: 40,
        l_hop: 16,
        n_l: 8,
        n_r: 16,
    };

    pub fn new(l_block: usize, l_hop: usize, n_l: usize, n_r: usize) -> Result<Self> {
        let spec = Self {
            l_block,
            l_hop,
            n_l,
            n_r,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with `l_hop` derived from the other three.
    pub fn from_past_future(l_block: usize, n_l: usize, n_r: usize) -> Result<Self> {
        if l_block <= n_l + n_r {
            return Err(Error::input(format!(
                "block of {l_block} frames leaves no hop with n_l={n_l}, n_r={n_r}"
            )));
        }
        Self::new(l_block, l_block - n_l - n_r, n_l, n_r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_hop == 0 || self.l_block == 0 {
            return Err(Error::input(format!("degenerate block spec {self}")));
        }
        if self.l_block != self.n_l + self.l_hop + self.n_r {
            return Err(Error::input(format!(
                "block spec {self}: l_block must equal n_l + l_hop + n_r"
            )));
        }
        Ok(())
    }

    pub fn num_blocks(&self, t_total: usize) -> usize {
        if t_total <= self.l_block {
            return 1;
        }
        // Smallest B whose un-stretched windows reach T.
        let covered_by_first = self.n_l + self.l_hop;
        1 + (t_total - covered_by_first).div_ceil(self.l_hop)
    }
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.l_block, self.l_hop, self.n_l, self.n_r
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    /// 1-based block index.
    pub index: usize,
    pub frames: Range<usize>,
    pub window: Range<usize>,
}

impl Block {
    /// The central window relative to the start of the block's frames.
    pub fn local_window(&self) -> Range<usize> {
        self.window.start - self.frames.start..self.window.end - self.frames.start
    }

    pub fn is_first(&self) -> bool {
        self.index == 1
    }
}

pub fn make_blocks(t_total: usize, spec: &BlockSpec) -> Result<Vec<Block>> {
    if t_total == 0 {
        return Err(Error::input("utterance has no frames"));
    }
    spec.validate()?;
    let count = spec.num_blocks(t_total);
    Ok((1..=count)
        .map(|b| Block {
            index: b,
            frames: block_frames(b, spec, t_total),
            window: window_unchecked(b, count, spec, t_total),
        })
        .collect())
}

fn block_frames(b: usize, spec: &BlockSpec, t_total: usize) -> Range<usize> {
    let start = (b - 1) * spec.l_hop;
    start..(start + spec.l_block).min(t_total)
}

fn window_unchecked(b: usize, count: usize, spec: &BlockSpec, t_total: usize) -> Range<usize> {
    let offset = (b - 1) * spec.l_hop;
    let start = if b == 1 { 0 } else { offset + spec.n_l };
    let end = if b == count {
        t_total
    } else {
        offset + spec.n_l + spec.l_hop
    };
    start..end
}

pub fn central_window(b: usize, spec: &BlockSpec, t_total: usize) -> Result<Range<usize>> {
    spec.validate()?;
    if t_total == 0 {
        return Err(Error::input("utterance has no frames"));
    }
    let count = spec.num_blocks(t_total);
    if b == 0 || b > count {
        return Err(Error::input(format!("block {b} outside 1..={count}")));
    }
    Ok(window_unchecked(b, count, spec, t_total))
}

/// Draws a block size uniformly from `lo..=hi`, holding `n_l` and `n_r` of
/// `base` fixed; the hop absorbs the change.
pub fn sample_block_size<R: Rng + ?Sized>(
    rng: &mut R,
    lo: usize,
    hi: usize,
    base: &BlockSpec,
) -> Result<BlockSpec> {
    if lo > hi {
        return Err(Error::input(format!("empty block size range [{lo}, {hi}]")));
    }
    let l_block = rng.random_range(lo..=hi);
    BlockSpec::from_past_future(l_block, base.n_l, base.n_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_based(r: &Range<usize>) -> (usize, usize) {
        (r.start + 1, r.end)
    }

    #[test]
    fn three_block_example() {
        let blocks = make_blocks(56, &BlockSpec::DEFAULT).unwrap();
        let got: Vec<_> = blocks
            .iter()
            .map(|b| (b.index, one_based(&b.frames), one_based(&b.window)))
            .collect();
        assert_eq!(
            got,
            vec![
                (1, (1, 40), (1, 24)),
                (2, (17, 56), (25, 40)),
                (3, (33, 56), (41, 56)),
            ]
        );
    }

    #[test]
    fn short_utterances_are_one_block() {
        for t in [10, 40] {
            let blocks = make_blocks(t, &BlockSpec::DEFAULT).unwrap();
            assert_eq!(blocks.len(), 1);
            assert_eq!(one_based(&blocks[0].frames), (1, t));
            assert_eq!(one_based(&blocks[0].window), (1, t));
        }
        let blocks = make_blocks(41, &BlockSpec::DEFAULT).unwrap();
        assert_eq!(blocks.len(), 3);
        assert_eq!(one_based(&blocks[2].window), (41, 41));
    }

    #[test]
    fn central_window_examples() {
        let s = BlockSpec::DEFAULT;
        assert_eq!(one_based(&central_window(2, &s, 56).unwrap()), (25, 40));
        assert_eq!(one_based(&central_window(1, &s, 56).unwrap()), (1, 24));
        assert_eq!(central_window(3, &s, 56).unwrap().end, 56);
        assert!(central_window(4, &s, 56).is_err());
        assert!(central_window(0, &s, 56).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(make_blocks(0, &BlockSpec::DEFAULT).is_err());
        assert!(BlockSpec::new(40, 15, 8, 16).is_err());
        assert!(BlockSpec::from_past_future(24, 8, 16).is_err());
    }

    #[test]
    fn degenerate_sample_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_block_size(&mut rng, 40, 40, &BlockSpec::DEFAULT).unwrap();
        assert_eq!(s, BlockSpec::DEFAULT);
        assert!(sample_block_size(&mut rng, 20, 22, &BlockSpec::DEFAULT).is_err());
        assert!(sample_block_size(&mut rng, 45, 35, &BlockSpec::DEFAULT).is_err());
    }

    #[test]
    fn sampled_sizes_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 10_000;
        let mut counts = [0usize; 11];
        for _ in 0..draws {
            let s = sample_block_size(&mut rng, 35, 45, &BlockSpec::DEFAULT).unwrap();
            assert_eq!((s.n_l, s.n_r), (8, 16));
            assert_eq!(s.l_hop, s.l_block - 24);
            counts[s.l_block - 35] += 1;
        }
        let p = 1.0 / 11.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "count {c} vs {mean}");
            chi2 += (c as f64 - mean).powi(2) / mean;
        }
        // 10 dof, p = 0.001 critical value
        assert!(chi2 < 29.59, "chi2 = {chi2}");
    }
}

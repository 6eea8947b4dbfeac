//! Vocabulary, transcripts, frame alignments and the CTC label primitives.
//!
//! Token id 0 is always the CTC blank. Real tokens occupy `1..|V|` and the
//! begin-of-sequence symbol used by the label-context LM sits one past the
//! end, at id `|V|`, so it can never be produced by an acoustic head.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK: TokenId = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from real token symbols; blank is prepended.
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(symbols.len() + 1);
        tokens.push("<blank>".to_string());
        for s in symbols {
            let s = s.as_ref();
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("bad token symbol {s:?}")));
            }
            if tokens.iter().any(|t| t == s) {
                return Err(Error::input(format!("duplicate token symbol {s:?}")));
            }
            tokens.push(s.to_string());
        }
        Ok(Self { tokens })
    }

    /// Character-like synthetic symbols: `a`..`z`, then `t26`, `t27`, ...
    pub fn synthetic(real_tokens: usize) -> Self {
        let symbols: Vec<String> = (0..real_tokens)
            .map(|i| {
                if i < 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        Self::new(&symbols).expect("synthetic symbols are unique")
    }

    /// |V|, including blank but excluding BOS.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank_id(&self) -> TokenId {
        BLANK
    }

    pub fn bos_id(&self) -> TokenId {
        self.tokens.len()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        if id == self.bos_id() {
            return Some("<bos>");
        }
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol)
    }

    pub fn real_tokens(&self) -> impl Iterator<Item = TokenId> {
        1..self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub utt_id: String,
    pub tokens: Vec<TokenId>,
}

impl Transcript {
    pub fn new(utt_id: impl Into<String>, tokens: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        let utt_id = utt_id.into();
        for &t in &tokens {
            if t == BLANK || t >= vocab.len() {
                return Err(Error::input(format!(
                    "transcript {utt_id}: token id {t} is not a real token"
                )));
            }
        }
        Ok(Self { utt_id, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameAlignment {
    pub utt_id: String,
    pub labels: Vec<TokenId>,
}

impl FrameAlignment {
    pub fn new(utt_id: impl Into<String>, labels: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        let utt_id = utt_id.into();
        check_ids(&labels, vocab.len())?;
        Ok(Self { utt_id, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// T frames of D synthetic features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utt_id: String,
    frames: usize,
    dim: usize,
    data: Vec<f64>,
    pub frame_duration: f64,
}

impl FeatureMatrix {
    pub fn new(
        utt_id: impl Into<String>,
        frames: usize,
        dim: usize,
        data: Vec<f64>,
        frame_duration: f64,
    ) -> Result<Self> {
        let utt_id = utt_id.into();
        if frames == 0 || dim == 0 {
            return Err(Error::input(format!(
                "features {utt_id}: empty ({frames}x{dim})"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::input(format!(
                "features {utt_id}: {} values for {frames}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "features {utt_id}: non-finite value at {i}"
            )));
        }
        if !(frame_duration > 0.0) {
            return Err(Error::input("frame duration must be positive"));
        }
        Ok(Self {
            utt_id,
            frames,
            dim,
            data,
            frame_duration,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows `start..end` (0-based, half-open) as a flat slice.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.dim..end * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 * self.frame_duration
    }
}

/// Per-frame log-distributions over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    frames: usize,
    vocab: usize,
    log_probs: Vec<f64>,
}

impl PosteriorMatrix {
    /// Wraps log-probabilities, checking each row normalizes.
    pub fn from_log_probs(frames: usize, vocab: usize, log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.len() != frames * vocab || vocab == 0 {
            return Err(Error::input("posterior shape mismatch"));
        }
        for t in 0..frames {
            let row = &log_probs[t * vocab..(t + 1) * vocab];
            let z = log_sum_exp(row);
            if (z.abs() > 1e-8) || z.is_nan() {
                return Err(Error::input(format!("posterior row {t} sums to exp({z})")));
            }
        }
        Ok(Self {
            frames,
            vocab,
            log_probs,
        })
    }

    /// Normalizes arbitrary real scores row-wise with log-softmax.
    pub fn from_logits(frames: usize, vocab: usize, mut logits: Vec<f64>) -> Result<Self> {
        if logits.len() != frames * vocab || vocab == 0 {
            return Err(Error::input("posterior shape mismatch"));
        }
        for row in logits.chunks_mut(vocab) {
            let z = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= z);
        }
        Ok(Self {
            frames,
            vocab,
            log_probs: logits,
        })
    }

    /// One-hot (up to `eps` smoothing) posteriors that put the mass on `labels`.
    pub fn one_hot(labels: &[TokenId], vocab: usize) -> Self {
        let mut lp = vec![-30.0; labels.len() * vocab];
        for (t, &l) in labels.iter().enumerate() {
            lp[t * vocab + l] = 0.0;
        }
        Self::from_logits(labels.len(), vocab, lp).expect("shape is consistent")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Rows `start..end`, as a new matrix.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            frames: end - start,
            vocab: self.vocab,
            log_probs: self.log_probs[start * self.vocab..end * self.vocab].to_vec(),
        }
    }

    pub fn concat(parts: &[PosteriorMatrix]) -> Result<Self> {
        let vocab = parts.first().map_or(0, |p| p.vocab);
        if parts.iter().any(|p| p.vocab != vocab) {
            return Err(Error::input("vocab mismatch in posterior concat"));
        }
        let log_probs: Vec<f64> = parts
            .iter()
            .flat_map(|p| p.log_probs.iter().copied())
            .collect();
        Ok(Self {
            frames: parts.iter().map(|p| p.frames).sum(),
            vocab,
            log_probs,
        })
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_ids(ids: &[TokenId], vocab_len: usize) -> Result<()> {
    match ids.iter().position(|&t| t >= vocab_len) {
        Some(i) => Err(Error::input(format!(
            "token id {} at position {i} outside vocabulary of {vocab_len}",
            ids[i]
        ))),
        None => Ok(()),
    }
}

/// CTC collapse: merge runs of identical ids, then drop blanks.
pub fn normalize(labels: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// [`normalize`] with id validation against `vocab`.
pub fn normalize_alignment(labels: &[TokenId], vocab: &Vocab) -> Result<Vec<TokenId>> {
    check_ids(labels, vocab.len())?;
    Ok(normalize(labels))
}

/// Token runs `(token, start, end)` (half-open) of an alignment, blanks excluded.
pub fn token_runs(labels: &[TokenId]) -> Vec<(TokenId, usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            if labels[start] != BLANK {
                runs.push((labels[start], start, t));
            }
            start = t;
        }
    }
    runs
}

pub fn validate_alignment(alignment: &FrameAlignment, transcript: &Transcript) -> bool {
    normalize(&alignment.labels) == transcript.tokens
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Error rate against a reference of `ref_len` tokens. An empty reference
    /// is scored as `I / 1`.
    pub fn rate(&self, ref_len: usize) -> f64 {
        self.errors() as f64 / ref_len.max(1) as f64
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.substitutions += rhs.substitutions;
        self.deletions += rhs.deletions;
        self.insertions += rhs.insertions;
    }
}

/// Minimal Levenshtein alignment of `hyp` against `reference`.
///
/// Among scripts of minimal total cost the one with the most substitutions
/// wins; this makes the split unique (D - I is fixed by the lengths) and keeps
/// the result symmetric under swapping the arguments.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hyp.len();
    // (cost, substitutions); lexicographic: lower cost, then more subs.
    let better = |a: (usize, usize), b: (usize, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    let mut prev: Vec<(usize, usize)> = (0..=m).map(|j| (j, 0)).collect();
    let mut cur = vec![(0usize, 0usize); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0);
        for j in 1..=m {
            let diag = if reference[i - 1] == hyp[j - 1] {
                prev[j - 1]
            } else {
                (prev[j - 1].0 + 1, prev[j - 1].1 + 1)
            };
            let del = (prev[j].0 + 1, prev[j].1);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1);
            let mut best = diag;
            if better(del, best) {
                best = del;
            }
            if better(ins, best) {
                best = ins;
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, subs) = prev[m];
    // cost = S + D + I and D - I = n - m.
    let rest = cost - subs;
    let deletions = ((rest + n) - m) / 2;
    EditCounts {
        substitutions: subs,
        deletions,
        insertions: rest - deletions,
    }
}

impl fmt::Display for EditCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S={} D={} I={}",
            self.substitutions, self.deletions, self.insertions
        )
    }
}

fn split_line<'a>(line: &'a str, path: &Path, offset: u64) -> Result<(&'a str, &'a str)> {
    line.split_once('\t').ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset,
        message: "expected `utt_id<TAB>...`".into(),
    })
}

/// Writes `utt_id<TAB>tok tok tok` lines using token symbols.
pub fn write_transcripts<W: Write>(out: &mut W, vocab: &Vocab, items: &[Transcript]) -> Result<()> {
    for t in items {
        let syms: Vec<&str> = t
            .tokens
            .iter()
            .map(|&id| vocab.symbol(id).unwrap_or("<unk>"))
            .collect();
        writeln!(out, "{}\t{}", t.utt_id, syms.join(" "))?;
    }
    Ok(())
}

pub fn read_transcripts<R: BufRead>(
    input: R,
    vocab: &Vocab,
    path: &Path,
) -> Result<Vec<Transcript>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in input.lines() {
        let line = line?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.is_empty() {
            continue;
        }
        let (utt, rest) = split_line(&line, path, line_offset)?;
        let mut tokens = Vec::new();
        for sym in rest.split_whitespace() {
            let id = vocab
                .id_of(sym)
                .filter(|&i| i != BLANK)
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    offset: line_offset,
                    message: format!("unknown token {sym:?}"),
                })?;
            tokens.push(id);
        }
        out.push(Transcript {
            utt_id: utt.to_string(),
            tokens,
        });
    }
    Ok(out)
}

/// Writes `utt_id<TAB>id id id` lines, one integer per frame.
pub fn write_alignments<W: Write>(out: &mut W, items: &[FrameAlignment]) -> Result<()> {
    for a in items {
        let ids: Vec<String> = a.labels.iter().map(|l| l.to_string()).collect();
        writeln!(out, "{}\t{}", a.utt_id, ids.join(" "))?;
    }
    Ok(())
}

pub fn read_alignments<R: BufRead>(
    input: R,
    vocab: &Vocab,
    path: &Path,
) -> Result<Vec<FrameAlignment>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in input.lines() {
        let line = line?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.is_empty() {
            continue;
        }
        let (utt, rest) = split_line(&line, path, line_offset)?;
        let fmt_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            offset: line_offset,
            message,
        };
        let labels = rest
            .split_whitespace()
            .map(|s| {
                s.parse::<TokenId>()
                    .map_err(|e| fmt_err(format!("bad id {s:?}: {e}")))
                    .and_then(|id| {
                        if id < vocab.len() {
                            Ok(id)
                        } else {
                            Err(fmt_err(format!("id {id} outside vocabulary")))
                        }
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FrameAlignment {
            utt_id: utt.to_string(),
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 1;
    const B: TokenId = 2;
    const C: TokenId = 3;
    const X: TokenId = 4;
    const E: TokenId = BLANK;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[A, A, E, B, E, B]), vec![A, B, B]);
        assert_eq!(normalize(&[E, E, E]), Vec::<TokenId>::new());
        assert_eq!(normalize(&[A, E, A]), vec![A, A]);
    }

    #[test]
    fn normalize_rejects_bad_ids() {
        let v = Vocab::synthetic(3);
        assert!(normalize_alignment(&[1, 4], &v).is_err());
        assert_eq!(normalize_alignment(&[1, 1, 3], &v).unwrap(), vec![1, 3]);
    }

    #[test]
    fn validate_examples() {
        let v = Vocab::synthetic(4);
        let al = |l: Vec<TokenId>| FrameAlignment::new("u", l, &v).unwrap();
        let tr = |t: Vec<TokenId>| Transcript::new("u", t, &v).unwrap();
        assert!(validate_alignment(&al(vec![A, A, E, B]), &tr(vec![A, B])));
        assert!(!validate_alignment(&al(vec![A, B]), &tr(vec![B, A])));
        assert!(validate_alignment(&al(vec![E]), &tr(vec![])));
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[A, B, C], &[A, B, C]), EditCounts::default());
        assert_eq!(
            edit_distance(&[A, B], &[A]),
            EditCounts {
                substitutions: 0,
                deletions: 1,
                insertions: 0
            }
        );
        assert_eq!(
            edit_distance(&[A, B, C], &[A, X, B, C]),
            EditCounts {
                substitutions: 0,
                deletions: 0,
                insertions: 1
            }
        );
    }

    #[test]
    fn empty_reference_is_pure_insertions() {
        let c = edit_distance(&[] as &[TokenId], &[A, B]);
        assert_eq!(
            c,
            EditCounts {
                substitutions: 0,
                deletions: 0,
                insertions: 2
            }
        );
        assert_eq!(c.rate(0), 2.0);
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::synthetic(20);
        assert_eq!(v.len(), 21);
        assert_eq!(v.blank_id(), 0);
        assert_eq!(v.bos_id(), 21);
        assert_eq!(v.symbol(1), Some("a"));
        assert_eq!(v.id_of("t"), Some(20));
        assert!(Vocab::new(&["a", "a"]).is_err());
    }

    #[test]
    fn transcript_rejects_blank() {
        let v = Vocab::synthetic(3);
        assert!(Transcript::new("u", vec![1, 0], &v).is_err());
        assert!(Transcript::new("u", vec![4], &v).is_err());
    }

    #[test]
    fn text_formats_round_trip() {
        let v = Vocab::synthetic(5);
        let ts = vec![
            Transcript::new("u1", vec![1, 2, 2], &v).unwrap(),
            Transcript::new("u2", vec![], &v).unwrap(),
        ];
        let mut buf = Vec::new();
        write_transcripts(&mut buf, &v, &ts).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "u1\ta b b\nu2\t\n");
        let back = read_transcripts(&buf[..], &v, Path::new("text")).unwrap();
        assert_eq!(back, ts);

        let al = vec![FrameAlignment::new("u1", vec![0, 1, 1, 0, 2], &v).unwrap()];
        let mut buf = Vec::new();
        write_alignments(&mut buf, &al).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "u1\t0 1 1 0 2\n");
        assert_eq!(
            read_alignments(&buf[..], &v, Path::new("align")).unwrap(),
            al
        );
    }

    #[test]
    fn bad_alignment_line_reports_offset() {
        let v = Vocab::synthetic(2);
        let err = read_alignments(&b"u1\t0 1\nu2\t0 9\n"[..], &v, Path::new("align")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 7),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn posterior_rows_normalize() {
        let p = PosteriorMatrix::from_logits(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        for t in 0..2 {
            assert!(log_sum_exp(p.row(t)).abs() < 1e-12);
        }
        assert!(PosteriorMatrix::from_log_probs(1, 2, vec![0.0, 0.0]).is_err());
    }
}

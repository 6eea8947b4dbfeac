//! Seeded synthetic corpora with known gold alignments, and dataset files.
//!
//! Transcripts come from a random bigram model. Each token is rendered as a
//! run of `d_min..=d_max` frames of its prototype vector plus Gaussian noise,
//! with optional silence (blank) frames between tokens. A blank frame is always
//! inserted between two identical tokens so the gold alignment normalizes back
//! to the transcript.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::blocking::{make_blocks, BlockSpec};
use crate::error::{Error, Result};
use crate::labels::{
    read_alignments, read_transcripts, token_runs, validate_alignment, write_alignments,
    write_transcripts, FeatureMatrix, FrameAlignment, TokenId, Transcript, Vocab, BLANK,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Real tokens, excluding blank.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub gap_prob: f64,
    /// Dirichlet concentration of each bigram row; small values give a
    /// predictable token sequence.
    pub bigram_concentration: f64,
    pub noise: f64,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub frame_duration: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            feat_dim: 16,
            dur_min: 2,
            dur_max: 6,
            gap_prob: 0.3,
            bigram_concentration: 0.3,
            noise: 0.3,
            prototype_scale: 1.0,
            len_min: 60,
            len_max: 200,
            train_size: 200,
            test_size: 50,
            frame_duration: 0.04,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::input(format!("corpus config: {m}")));
        if self.vocab_size == 0 || self.feat_dim == 0 {
            return bad("vocab_size and feat_dim must be positive");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("need 1 <= dur_min <= dur_max");
        }
        if self.len_min == 0 || self.len_min > self.len_max || self.len_min < self.dur_max + 2 {
            return bad("utterance length range too small");
        }
        if !(0.0..=1.0).contains(&self.gap_prob) {
            return bad("gap_prob outside [0, 1]");
        }
        if !(self.noise >= 0.0)
            || !(self.prototype_scale > 0.0)
            || !(self.bigram_concentration > 0.0)
        {
            return bad("noise must be >= 0, prototype scale and concentration > 0");
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("sizes must be >= 1");
        }
        if !(self.frame_duration > 0.0) {
            return bad("frame_duration must be positive");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FeatureMatrix,
    pub transcript: Transcript,
    pub alignment: FrameAlignment,
}

impl Utterance {
    pub fn utt_id(&self) -> &str {
        &self.transcript.utt_id
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// The generative model shared by acoustic corpora and external text.
#[derive(Debug, Clone)]
pub struct BigramSource {
    /// Row `prev` (0 = start of sentence) gives P(next = k + 1).
    pub rows: Vec<Vec<f64>>,
}

impl BigramSource {
    fn new(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Self {
        let gamma = Gamma::new(cfg.bigram_concentration, 1.0).expect("positive concentration");
        let rows = (0..=cfg.vocab_size)
            .map(|_| {
                let mut w: Vec<f64> = (0..cfg.vocab_size)
                    .map(|_| gamma.sample(rng).max(1e-12))
                    .collect();
                let z: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= z);
                w
            })
            .collect();
        Self { rows }
    }

    fn next<R: Rng>(&self, prev: TokenId, rng: &mut R) -> TokenId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.rows[prev];
        for (k, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return k + 1;
            }
        }
        row.len()
    }

    /// Stationary-process entropy rate (nats) of the chain started from the
    /// sentence-start row, estimated from the row distribution weighted by the
    /// chain's stationary distribution.
    pub fn entropy_rate(&self) -> f64 {
        let n = self.rows[0].len();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..2000 {
            let mut next = vec![0.0; n];
            for (i, w) in pi.iter().enumerate() {
                for (j, p) in self.rows[i + 1].iter().enumerate() {
                    next[j] += w * p;
                }
            }
            pi = next;
        }
        pi.iter()
            .enumerate()
            .map(|(i, w)| {
                w * -self.rows[i + 1]
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>()
            })
            .sum()
    }
}

struct Seeds {
    bigram: u64,
    prototypes: u64,
    train: u64,
    test: u64,
    external: u64,
}

fn seeds(seed: u64) -> Seeds {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Seeds {
        bigram: master.random(),
        prototypes: master.random(),
        train: master.random(),
        test: master.random(),
        external: master.random(),
    }
}

pub fn bigram_source(cfg: &CorpusConfig) -> BigramSource {
    BigramSource::new(cfg, &mut ChaCha8Rng::seed_from_u64(seeds(cfg.seed).bigram))
}

fn prototypes(cfg: &CorpusConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds(cfg.seed).prototypes);
    let normal = Normal::new(0.0, cfg.prototype_scale).expect("positive scale");
    (0..=cfg.vocab_size)
        .map(|k| {
            if k == BLANK {
                // silence sits near the origin
                (0..cfg.feat_dim)
                    .map(|_| 0.1 * normal.sample(&mut rng))
                    .collect()
            } else {
                (0..cfg.feat_dim).map(|_| normal.sample(&mut rng)).collect()
            }
        })
        .collect()
}

fn gen_utterance(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    source: &BigramSource,
    protos: &[Vec<f64>],
    utt_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let target = rng.random_range(cfg.len_min..=cfg.len_max);
    let mut labels: Vec<TokenId> = Vec::with_capacity(target);
    let lead = rng.random_range(0..=2);
    labels.extend(std::iter::repeat_n(BLANK, lead));
    let mut tokens = Vec::new();
    let mut prev = 0;
    loop {
        let tok = source.next(prev, rng);
        let dur = rng.random_range(cfg.dur_min..=cfg.dur_max);
        let needs_gap = labels.last() == Some(&tok);
        if labels.len() + dur + usize::from(needs_gap) > target {
            break;
        }
        if needs_gap {
            labels.push(BLANK);
        }
        labels.extend(std::iter::repeat_n(tok, dur));
        tokens.push(tok);
        prev = tok;
        if rng.random_bool(cfg.gap_prob) {
            let gap = rng.random_range(1..=2);
            labels.extend(std::iter::repeat_n(BLANK, gap));
        }
    }
    labels.resize(target, BLANK);

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(target * cfg.feat_dim);
    for &l in &labels {
        for &p in &protos[l] {
            let v = if cfg.noise > 0.0 {
                p + noise.sample(rng)
            } else {
                p
            };
            // stored as f32 on disk; keep values exactly representable
            data.push(v as f32 as f64);
        }
    }
    let features = FeatureMatrix::new(
        utt_id.clone(),
        target,
        cfg.feat_dim,
        data,
        cfg.frame_duration,
    )?;
    let transcript = Transcript::new(utt_id.clone(), tokens, vocab)?;
    let alignment = FrameAlignment::new(utt_id, labels, vocab)?;
    debug_assert!(validate_alignment(&alignment, &transcript));
    Ok(Utterance {
        features,
        transcript,
        alignment,
    })
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let s = seeds(cfg.seed);
    let source = bigram_source(cfg);
    let protos = prototypes(cfg);
    let split = |prefix: &str, n: usize, seed: u64| -> Result<Vec<Utterance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                gen_utterance(
                    cfg,
                    &vocab,
                    &source,
                    &protos,
                    format!("{prefix}{i:05}"),
                    &mut rng,
                )
            })
            .collect()
    };
    let train = split("train", cfg.train_size, s.train)?;
    let test = split("test", cfg.test_size, s.test)?;
    Ok(Corpus { vocab, train, test })
}

/// `multiplier x train_size` transcripts from the corpus bigram model, drawn
/// from a seed stream disjoint from the acoustic splits.
pub fn gen_external_text(cfg: &CorpusConfig, multiplier: usize) -> Result<Vec<Transcript>> {
    cfg.validate()?;
    if multiplier == 0 {
        return Err(Error::input("external text multiplier must be >= 1"));
    }
    let vocab = cfg.vocab();
    let source = bigram_source(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds(cfg.seed).external);
    let mean_tokens = (cfg.len_min + cfg.len_max) as f64
        / 2.0
        / ((cfg.dur_min + cfg.dur_max) as f64 / 2.0 + cfg.gap_prob * 1.5);
    let max_tokens = (mean_tokens * 2.0).ceil() as usize;
    (0..multiplier * cfg.train_size)
        .map(|i| {
            let len = rng.random_range(1..=max_tokens.max(1));
            let mut prev = 0;
            let tokens = (0..len)
                .map(|_| {
                    prev = source.next(prev, &mut rng);
                    prev
                })
                .collect();
            Transcript::new(format!("ext{i:06}"), tokens, &vocab)
        })
        .collect()
}

/// Frame cut positions (0-based index of the first frame after the cut)
/// where some block's frame range or central window begins or ends.
pub fn block_boundaries(t_total: usize, spec: &BlockSpec) -> Result<Vec<usize>> {
    let mut cuts: Vec<usize> = make_blocks(t_total, spec)?
        .iter()
        .flat_map(|b| [b.frames.start, b.frames.end, b.window.start, b.window.end])
        .filter(|&c| c > 0 && c < t_total)
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    Ok(cuts)
}

/// Fraction of gold token runs that contain a block boundary.
pub fn straddle_rate(utts: &[Utterance], spec: &BlockSpec) -> Result<f64> {
    let mut total = 0usize;
    let mut straddling = 0usize;
    for u in utts {
        let cuts = block_boundaries(u.alignment.len(), spec)?;
        for (_, s, e) in token_runs(&u.alignment.labels) {
            total += 1;
            if cuts.iter().any(|&c| c > s && c < e) {
                straddling += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        straddling as f64 / total as f64
    })
}

/// Writes `feats/<utt_id>.sarf`, `text` and `align` under `dir`.
pub fn write_dataset(dir: &Path, vocab: &Vocab, utts: &[Utterance]) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats)?;
    for u in utts {
        write_features(&feats.join(format!("{}.sarf", u.utt_id())), &u.features)?;
    }
    let transcripts: Vec<Transcript> = utts.iter().map(|u| u.transcript.clone()).collect();
    let alignments: Vec<FrameAlignment> = utts.iter().map(|u| u.alignment.clone()).collect();
    let mut text = BufWriter::new(fs::File::create(dir.join("text"))?);
    write_transcripts(&mut text, vocab, &transcripts)?;
    text.flush()?;
    let mut align = BufWriter::new(fs::File::create(dir.join("align"))?);
    write_alignments(&mut align, &alignments)?;
    align.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path, vocab: &Vocab, frame_duration: f64) -> Result<Vec<Utterance>> {
    let text_path = dir.join("text");
    let align_path = dir.join("align");
    let transcripts = read_transcripts(
        BufReader::new(fs::File::open(&text_path)?),
        vocab,
        &text_path,
    )?;
    let alignments = read_alignments(
        BufReader::new(fs::File::open(&align_path)?),
        vocab,
        &align_path,
    )?;
    if transcripts.len() != alignments.len() {
        return Err(Error::Format {
            path: align_path,
            offset: 0,
            message: format!(
                "{} alignments for {} transcripts",
                alignments.len(),
                transcripts.len()
            ),
        });
    }
    transcripts
        .into_iter()
        .zip(alignments)
        .map(|(transcript, alignment)| {
            if transcript.utt_id != alignment.utt_id {
                return Err(Error::input(format!(
                    "text/align order mismatch: {} vs {}",
                    transcript.utt_id, alignment.utt_id
                )));
            }
            let path = feature_path(dir, &transcript.utt_id);
            let features = read_features(&path, &transcript.utt_id, frame_duration)?;
            if features.frames() != alignment.len() {
                return Err(Error::input(format!(
                    "{}: {} feature frames but {} alignment labels",
                    transcript.utt_id,
                    features.frames(),
                    alignment.len()
                )));
            }
            Ok(Utterance {
                features,
                transcript,
                alignment,
            })
        })
        .collect()
}

pub fn feature_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join("feats").join(format!("{utt_id}.sarf"))
}

/// `SARF`, u32 LE frames, u32 LE dim, f32 LE row-major values.
pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(b"SARF")?;
    w.write_all(&(f.frames() as u32).to_le_bytes())?;
    w.write_all(&(f.dim() as u32).to_le_bytes())?;
    for &v in f.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path, utt_id: &str, frame_duration: f64) -> Result<FeatureMatrix> {
    let bytes = fs::read(path)?;
    let err = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != b"SARF" {
        return Err(err(0, "bad magic, expected SARF"));
    }
    if bytes.len() < 12 {
        return Err(err(bytes.len(), "truncated header"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let need = 12 + frames * dim * 4;
    if bytes.len() < need {
        return Err(err(
            bytes.len(),
            &format!("truncated: expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(err(need, "trailing bytes after feature data"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureMatrix::new(utt_id, frames, dim, data, frame_duration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::normalize;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train_size: 20,
            test_size: 5,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn gold_alignments_normalize_to_transcripts() {
        let c = gen_corpus(&small()).unwrap();
        for u in c.train.iter().chain(&c.test) {
            assert!(validate_alignment(&u.alignment, &u.transcript));
            assert_eq!(u.features.frames(), u.alignment.len());
            assert!((60..=200).contains(&u.alignment.len()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = gen_corpus(&CorpusConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn noiseless_frames_are_nearest_prototype_separable() {
        let cfg = CorpusConfig {
            noise: 0.0,
            ..small()
        };
        let protos = prototypes(&cfg);
        let c = gen_corpus(&cfg).unwrap();
        for u in &c.train {
            for t in 0..u.features.frames() {
                let row = u.features.row(t);
                let nearest = (0..protos.len())
                    .min_by(|&a, &b| {
                        let d = |k: usize| {
                            protos[k]
                                .iter()
                                .zip(row)
                                .map(|(p, x)| (p - x).powi(2))
                                .sum::<f64>()
                        };
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                assert_eq!(nearest, u.alignment.labels[t]);
            }
        }
    }

    #[test]
    fn external_text_sizes() {
        let cfg = small();
        assert_eq!(gen_external_text(&cfg, 1).unwrap().len(), 20);
        assert_eq!(gen_external_text(&cfg, 10).unwrap().len(), 200);
        assert!(gen_external_text(&cfg, 0).is_err());
    }

    #[test]
    fn token_runs_and_boundaries() {
        assert_eq!(
            token_runs(&[0, 1, 1, 0, 2, 1]),
            vec![(1, 1, 3), (2, 4, 5), (1, 5, 6)]
        );
        assert_eq!(
            block_boundaries(56, &BlockSpec::DEFAULT).unwrap(),
            vec![16, 24, 32, 40]
        );
    }

    #[test]
    fn rejects_bad_config() {
        assert!(gen_corpus(&CorpusConfig {
            dur_min: 0,
            ..small()
        })
        .is_err());
        assert!(gen_corpus(&CorpusConfig {
            noise: -1.0,
            ..small()
        })
        .is_err());
        assert!(gen_corpus(&CorpusConfig {
            train_size: 0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_corpus(&small()).unwrap();
        write_dataset(dir.path(), &c.vocab, &c.train).unwrap();
        let back = read_dataset(dir.path(), &c.vocab, 0.04).unwrap();
        assert_eq!(back, c.train);
        assert_eq!(
            normalize(&back[0].alignment.labels),
            back[0].transcript.tokens
        );
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::synthetic(3);
        write_dataset(dir.path(), &v, &[]).unwrap();
        assert_eq!(fs::read(dir.path().join("text")).unwrap(), b"");
        assert!(read_dataset(dir.path(), &v, 0.04).unwrap().is_empty());
    }

    #[test]
    fn truncated_features_name_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_corpus(&small()).unwrap();
        write_dataset(dir.path(), &c.vocab, &c.train[..1]).unwrap();
        let path = feature_path(dir.path(), c.train[0].utt_id());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let msg = read_dataset(dir.path(), &c.vocab, 0.04)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("train00000.sarf"), "{msg}");
        assert!(
            msg.contains(&format!("byte offset {}", bytes.len() - 5)),
            "{msg}"
        );

        fs::write(&path, b"XXXX").unwrap();
        assert!(read_features(&path, "u", 0.04)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }
}

//! WER, streaming latency and matched-pair significance.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::blocking::{make_blocks, BlockSpec};
use crate::error::{Error, Result};
use crate::labels::{edit_distance, EditCounts, Transcript};

/// How per-block processing time is charged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostModel {
    /// Measured inference time.
    WallClock,
    /// `c * frames^2` seconds for a pass over `frames` frames.
    Synthetic { c: f64 },
}

impl CostModel {
    pub fn synthetic(c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::input(format!(
                "synthetic cost coefficient must be >= 0, got {c}"
            )));
        }
        Ok(Self::Synthetic { c })
    }

    /// Processing time of a pass over `frames` frames that took `measured_s`.
    pub fn charge(&self, frames: usize, measured_s: f64) -> f64 {
        match *self {
            Self::WallClock => measured_s,
            Self::Synthetic { c } => c * (frames * frames) as f64,
        }
    }

    pub fn is_wall_clock(&self) -> bool {
        matches!(self, Self::WallClock)
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WallClock => write!(f, "wall-clock"),
            Self::Synthetic { c } => write!(f, "synthetic(c={c})"),
        }
    }
}

impl FromStr for CostModel {
    type Err = Error;

    /// `wall-clock` or `synthetic:<c>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "wall-clock" => Ok(Self::WallClock),
            Some(("synthetic", c)) => {
                let c: f64 = c
                    .parse()
                    .map_err(|_| Error::input(format!("bad cost coefficient {c:?}")))?;
                Self::synthetic(c)
            }
            _ => Err(Error::input(format!("unknown cost model {s:?}"))),
        }
    }
}

/// Discrete-event clock of a streaming decoder: block `b` becomes available
/// once its last frame has been spoken and starts when both it and the
/// previous block are done.
#[derive(Debug, Clone)]
pub struct Timeline {
    cost: CostModel,
    frame_duration: f64,
    completion: f64,
}

impl Timeline {
    pub fn new(cost: CostModel, frame_duration: f64) -> Self {
        Self {
            cost,
            frame_duration,
            completion: 0.0,
        }
    }

    /// Charges one block pass over frames `start..end` and returns its completion time.
    pub fn complete_block(&mut self, end: usize, frames: usize, measured_s: f64) -> f64 {
        let available = end as f64 * self.frame_duration;
        self.completion = self.completion.max(available) + self.cost.charge(frames, measured_s);
        self.completion
    }

    /// Charges a whole-utterance pass that starts after all `t_total` frames.
    pub fn complete_utterance(&mut self, t_total: usize, measured_s: f64) -> f64 {
        self.complete_block(t_total, t_total, measured_s)
    }

    pub fn now(&self) -> f64 {
        self.completion
    }
}

/// Per-block completion times with no measured component (wall-clock mode
/// therefore yields pure availability times).
pub fn block_schedule(
    t_total: usize,
    spec: &BlockSpec,
    cost: CostModel,
    frame_duration: f64,
) -> Result<Vec<f64>> {
    let mut clock = Timeline::new(cost, frame_duration);
    Ok(make_blocks(t_total, spec)?
        .iter()
        .map(|b| clock.complete_block(b.frames.end, b.frames.len(), 0.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEvent {
    pub utt_id: String,
    pub duration_s: f64,
    pub last_emit_s: f64,
}

pub fn mean_latency(events: &[LatencyEvent]) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::input("mean latency of zero utterances"));
    }
    Ok(events
        .iter()
        .map(|e| e.last_emit_s - e.duration_s)
        .sum::<f64>()
        / events.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UttResult {
    pub utt_id: String,
    pub ref_len: usize,
    pub counts: EditCounts,
}

impl UttResult {
    pub fn correct(&self) -> bool {
        self.counts.errors() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    /// In reference order.
    pub utts: Vec<UttResult>,
    pub total: EditCounts,
    pub ref_words: usize,
}

impl WerReport {
    pub fn wer(&self) -> f64 {
        self.total.rate(self.ref_words)
    }
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "WER {:.2}% [{} / {}, {}]",
            100.0 * self.wer(),
            self.total.errors(),
            self.ref_words,
            self.total
        )
    }
}

pub fn wer_report(refs: &[Transcript], hyps: &[Transcript]) -> Result<WerReport> {
    let mut by_id: HashMap<&str, &Transcript> = HashMap::with_capacity(hyps.len());
    for h in hyps {
        if by_id.insert(&h.utt_id, h).is_some() {
            return Err(Error::input(format!(
                "duplicate hypothesis for {}",
                h.utt_id
            )));
        }
    }
    if refs.len() != hyps.len() {
        return Err(Error::input(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut utts = Vec::with_capacity(refs.len());
    let mut total = EditCounts::default();
    let mut ref_words = 0;
    for r in refs {
        let h = by_id
            .get(r.utt_id.as_str())
            .ok_or_else(|| Error::input(format!("no hypothesis for {}", r.utt_id)))?;
        let counts = edit_distance(&r.tokens, &h.tokens);
        total += counts;
        ref_words += r.len();
        utts.push(UttResult {
            utt_id: r.utt_id.clone(),
            ref_len: r.len(),
            counts,
        });
    }
    Ok(WerReport {
        utts,
        total,
        ref_words,
    })
}

/// Largest `n` for which binomial tails are computed exactly.
pub const EXACT_LIMIT: u64 = 50;

/// Two-sided p-value of `k` successes in `n` fair coin flips.
pub fn binomial_two_sided(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let tail = k.min(n - k);
    if n <= EXACT_LIMIT {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        (2.0 * b.cdf(tail)).min(1.0)
    } else {
        let half = n as f64 / 2.0;
        let z = ((k as f64 - half).abs() - 0.5).max(0.0) / (n as f64 / 4.0).sqrt();
        let normal = Normal::standard();
        (2.0 * normal.sf(z)).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    /// Utterances where P made fewer errors than Q, and vice versa.
    pub p_better: usize,
    pub q_better: usize,
    pub sign_p: f64,
    /// Utterances P got right and Q wrong, and vice versa.
    pub p_only_correct: usize,
    pub q_only_correct: usize,
    pub mcnemar_p: f64,
}

/// Sign test on per-utterance error counts and McNemar on utterance
/// correctness, both two-sided.
pub fn matched_pair_test(p: &WerReport, q: &WerReport) -> Result<PairedTest> {
    if p.utts.len() != q.utts.len() {
        return Err(Error::input(format!(
            "unpaired systems: {} vs {} utterances",
            p.utts.len(),
            q.utts.len()
        )));
    }
    let q_by_id: HashMap<&str, &UttResult> =
        q.utts.iter().map(|u| (u.utt_id.as_str(), u)).collect();
    let (mut p_better, mut q_better, mut p_only, mut q_only) = (0, 0, 0, 0);
    for a in &p.utts {
        let b = q_by_id
            .get(a.utt_id.as_str())
            .ok_or_else(|| Error::input(format!("{} missing from second system", a.utt_id)))?;
        let (ea, eb) = (a.counts.errors(), b.counts.errors());
        if ea < eb {
            p_better += 1;
        } else if eb < ea {
            q_better += 1;
        }
        match (a.correct(), b.correct()) {
            (true, false) => p_only += 1,
            (false, true) => q_only += 1,
            _ => {}
        }
    }
    Ok(PairedTest {
        n: p.utts.len(),
        p_better,
        q_better,
        sign_p: binomial_two_sided(p_better as u64, (p_better + q_better) as u64),
        p_only_correct: p_only,
        q_only_correct: q_only,
        mcnemar_p: mcnemar(p_only as u64, q_only as u64),
    })
}

/// McNemar on discordant counts: exact binomial up to [`EXACT_LIMIT`],
/// continuity-corrected chi-square (one dof) above.
pub fn mcnemar(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n <= EXACT_LIMIT {
        return binomial_two_sided(b, n);
    }
    let chi2 = ((b as f64 - c as f64).abs() - 1.0).max(0.0).powi(2) / n as f64;
    (2.0 * Normal::standard().sf(chi2.sqrt())).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub system: String,
    pub decoder: String,
    pub wer: f64,
    pub mean_latency_s: f64,
    /// Sign-test p against the baseline row; `None` for the baseline itself.
    pub p_vs_baseline: Option<f64>,
    pub config_hash: String,
}

pub const REPORT_HEADER: &str = "system,decoder,wer,mean_latency_s,p_vs_baseline,config_hash";

pub fn write_report_csv<W: Write>(out: &mut W, rows: &[ReportRow]) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        let p = r
            .p_vs_baseline
            .map_or_else(|| "-".to_string(), |p| format!("{p:.6e}"));
        writeln!(
            out,
            "{},{},{:.6},{:.6},{p},{}",
            r.system, r.decoder, r.wer, r.mean_latency_s, r.config_hash
        )?;
    }
    Ok(())
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<12} {:<10} {:>8} {:>12} {:>12}\n",
        "system", "decoder", "WER%", "latency(s)", "p"
    );
    for r in rows {
        let p = r
            .p_vs_baseline
            .map_or_else(|| "-".to_string(), |p| format!("{p:.3e}"));
        s.push_str(&format!(
            "{:<12} {:<10} {:>8.2} {:>12.4} {:>12}\n",
            r.system,
            r.decoder,
            100.0 * r.wer,
            r.mean_latency_s,
            p
        ));
    }
    s
}

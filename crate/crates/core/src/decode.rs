//! Greedy decoders over blockwise posteriors.
//!
//! Every decoder walks the blocks in order, feeding the label history it has
//! produced so far back into the scorer. They differ in how block outputs are
//! turned into emitted tokens:
//!
//! * [`decode_full`] waits for the whole utterance and collapses the
//!   concatenated central-window outputs once.
//! * [`decode_naive`] collapses each central window on its own, so a token
//!   spanning a window edge is emitted twice.
//! * [`decode_alignment`] defers a block's trailing token run until the next
//!   block shows whether it continues.
//! * [`decode_overlap`] also looks `n_r` frames past the window and merges
//!   runs that overlap the next block's first run.

use std::io::Write;
use std::time::Instant;

use crate::blocking::{make_blocks, Block, BlockSpec};
use crate::ctc::best_path;
use crate::error::Result;
use crate::eval::{CostModel, LatencyEvent, Timeline};
use crate::labels::{
    normalize, token_runs, FeatureMatrix, FrameAlignment, PosteriorMatrix, TokenId, Transcript,
    Vocab, BLANK,
};
use crate::model::{AcousticContext, SarModel};

/// Anything that produces per-block frame posteriors given the label history.
pub trait BlockScorer {
    /// Carried from one block to the next (the acoustic context for models).
    type State;

    fn initial_state(&self) -> Self::State;

    /// Log posteriors for every frame of `block`.
    fn score_block(
        &self,
        x: &FeatureMatrix,
        block: &Block,
        label_prefix: &[TokenId],
        state: &mut Self::State,
    ) -> Result<PosteriorMatrix>;
}

impl BlockScorer for SarModel {
    type State = AcousticContext;

    fn initial_state(&self) -> AcousticContext {
        self.initial_acoustic_context()
    }

    fn score_block(
        &self,
        x: &FeatureMatrix,
        block: &Block,
        label_prefix: &[TokenId],
        state: &mut AcousticContext,
    ) -> Result<PosteriorMatrix> {
        SarModel::score_block(self, x, block, label_prefix, state)
    }
}

/// Fixed posteriors over the whole utterance, sliced per block.
#[derive(Debug, Clone)]
pub struct TeacherScorer {
    pub posteriors: PosteriorMatrix,
}

impl TeacherScorer {
    /// One-hot posteriors of a frame alignment.
    pub fn from_alignment(alignment: &FrameAlignment, vocab: usize) -> Self {
        Self {
            posteriors: PosteriorMatrix::one_hot(&alignment.labels, vocab),
        }
    }
}

impl BlockScorer for TeacherScorer {
    type State = ();

    fn initial_state(&self) {}

    fn score_block(
        &self,
        _x: &FeatureMatrix,
        block: &Block,
        _label_prefix: &[TokenId],
        _state: &mut (),
    ) -> Result<PosteriorMatrix> {
        Ok(self.posteriors.slice(block.frames.start, block.frames.end))
    }
}

/// Running state of alignment greedy decoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoderState<S> {
    /// Raw frame labels chosen so far, one per processed central-window frame.
    pub a_hist: Vec<TokenId>,
    /// Deferred trailing run of the previous block.
    pub y_prev: Vec<TokenId>,
    pub y_out: Vec<TokenId>,
    pub c_ac: S,
}

impl<S> DecoderState<S> {
    pub fn new(c_ac: S) -> Self {
        Self {
            a_hist: Vec::new(),
            y_prev: Vec::new(),
            y_out: Vec::new(),
            c_ac,
        }
    }

    /// Lines 8 to 16 of alignment greedy decoding for one block output.
    /// Returns the tokens emitted by this block.
    pub fn alignment_step(&mut self, a_out: &[TokenId], is_final: bool) -> Vec<TokenId> {
        self.a_hist.extend_from_slice(a_out);
        let mut frames = std::mem::take(&mut self.y_prev);
        frames.extend_from_slice(a_out);
        if !is_final {
            if let Some(&last) = frames.last().filter(|&&t| t != BLANK) {
                let keep = frames.iter().rposition(|&t| t != last).map_or(0, |i| i + 1);
                self.y_prev = frames.split_off(keep);
            }
        }
        let emitted = normalize(&frames);
        self.y_out.extend_from_slice(&emitted);
        emitted
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub token: TokenId,
    pub block: usize,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLog {
    pub utt_id: String,
    pub emissions: Vec<Emission>,
    pub duration_s: f64,
    /// Completion time of the last processing step.
    pub finish_s: f64,
}

impl EmissionLog {
    /// Time of the final token, or of the last processing step when nothing
    /// was emitted.
    pub fn last_emit_s(&self) -> f64 {
        self.emissions.last().map_or(self.finish_s, |e| e.time_s)
    }

    pub fn latency_event(&self) -> LatencyEvent {
        LatencyEvent {
            utt_id: self.utt_id.clone(),
            duration_s: self.duration_s,
            last_emit_s: self.last_emit_s(),
        }
    }

    /// Rows of `utt_id,block,token,time_s`, without header.
    pub fn write_csv<W: Write>(&self, out: &mut W, vocab: &Vocab) -> Result<()> {
        for e in &self.emissions {
            let sym = vocab.symbol(e.token).unwrap_or("?");
            writeln!(out, "{},{},{},{:.6}", self.utt_id, e.block, sym, e.time_s)?;
        }
        Ok(())
    }
}

pub const EMISSION_CSV_HEADER: &str = "utt_id,block,token,time_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    Full,
    Naive,
    Overlap,
    Alignment,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [Self::Full, Self::Naive, Self::Overlap, Self::Alignment];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Naive => "naive",
            Self::Overlap => "overlap",
            Self::Alignment => "align",
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::input(format!("unknown decoder {s:?}")))
    }
}

pub fn decode<M: BlockScorer>(
    kind: DecoderKind,
    model: &M,
    x: &FeatureMatrix,
    spec: &BlockSpec,
    cost: CostModel,
) -> Result<(Transcript, EmissionLog)> {
    match kind {
        DecoderKind::Full => decode_full(model, x, spec, cost),
        DecoderKind::Naive => decode_naive(model, x, spec, cost),
        DecoderKind::Overlap => decode_overlap(model, x, spec, cost),
        DecoderKind::Alignment => decode_alignment(model, x, spec, cost),
    }
}

struct BlockOutput<'a> {
    block: &'a Block,
    posteriors: &'a PosteriorMatrix,
    /// Best path over the central window.
    a_out: &'a [TokenId],
    is_final: bool,
}

struct Walk {
    log: EmissionLog,
    measured_s: f64,
}

/// Runs the scorer block by block. `step` records the block's central output
/// in `a_hist` and returns the tokens to emit at the block's completion time.
fn walk<M, F>(
    model: &M,
    x: &FeatureMatrix,
    spec: &BlockSpec,
    cost: CostModel,
    mut step: F,
) -> Result<Walk>
where
    M: BlockScorer,
    F: FnMut(&mut DecoderState<M::State>, &BlockOutput<'_>) -> Vec<TokenId>,
{
    let blocks = make_blocks(x.frames(), spec)?;
    let mut state = DecoderState::new(model.initial_state());
    let mut clock = Timeline::new(cost, x.frame_duration);
    let mut log = EmissionLog {
        utt_id: x.utt_id.clone(),
        emissions: Vec::new(),
        duration_s: x.duration_s(),
        finish_s: 0.0,
    };
    let mut measured_s = 0.0;
    for block in &blocks {
        let started = Instant::now();
        let prefix = normalize(&state.a_hist);
        let posteriors = model.score_block(x, block, &prefix, &mut state.c_ac)?;
        let w = block.local_window();
        let a_out = best_path(&posteriors.slice(w.start, w.end));
        let elapsed = if cost.is_wall_clock() {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        measured_s += elapsed;
        let done = clock.complete_block(block.frames.end, block.frames.len(), elapsed);
        let out = BlockOutput {
            block,
            posteriors: &posteriors,
            a_out: &a_out,
            is_final: block.index == blocks.len(),
        };
        for token in step(&mut state, &out) {
            log.emissions.push(Emission {
                token,
                block: block.index,
                time_s: done,
            });
        }
    }
    log.finish_s = clock.now();
    Ok(Walk { log, measured_s })
}

fn finish(walk: Walk) -> (Transcript, EmissionLog) {
    let tokens = walk.log.emissions.iter().map(|e| e.token).collect();
    (
        Transcript {
            utt_id: walk.log.utt_id.clone(),
            tokens,
        },
        walk.log,
    )
}

/// Whole-utterance greedy decoding; every token is emitted once the full
/// utterance has been processed.
pub fn decode_full<M: BlockScorer>(
    model: &M,
    x: &FeatureMatrix,
    spec: &BlockSpec,
    cost: CostModel,
) -> Result<(Transcript, EmissionLog)> {
    let mut windows = Vec::new();
    let walk = walk(model, x, spec, cost, |state, out| {
        state.a_hist.extend_from_slice(out.a_out);
        let w = out.block.local_window();
        windows.push(out.posteriors.slice(w.start, w.end));
        Vec::new()
    })?;
    let tokens = normalize(&best_path(&PosteriorMatrix::concat(&windows)?));
    let mut clock = Timeline::new(cost, x.frame_duration);
    let done = clock.complete_utterance(x.frames(), walk.measured_s);
    let log = EmissionLog {
        utt_id: x.utt_id.clone(),
        emissions: tokens
            .iter()
            .map(|&token| Emission {
                token,
                block: spec.num_blocks(x.frames()),
                time_s: done,
            })
            .collect(),
        duration_s: x.duration_s(),
        finish_s: done,
    };
    Ok((
        Transcript {
            utt_id: x.utt_id.clone(),
            tokens,
        },
        log,
    ))
}

/// Collapses each block's central window independently.
pub fn decode_naive<M: BlockScorer>(
    model: &M,
    x: &FeatureMatrix,
    spec: &BlockSpec,
    cost: CostModel,
) -> Result<(Transcript, EmissionLog)> {
    let walk = walk(model, x, spec, cost, |state, out| {
        state.a_hist.extend_from_slice(out.a_out);
        let emitted = normalize(out.a_out);
        state.y_out.extend_from_slice(&emitted);
        emitted
    })?;
    Ok(finish(walk))
}

/// Alignment greedy decoding.
pub fn decode_alignment<M: BlockScorer>(
    model: &M,
    x: &FeatureMatrix,
    spec: &BlockSpec,
    cost: CostModel,
) -> Result<(Transcript, EmissionLog)> {
    let walk = walk(model, x, spec, cost, |state, out| {
        state.alignment_step(out.a_out, out.is_final)
    })?;
    Ok(finish(walk))
}

/// Overlap greedy decoding: each block also decodes `n_r` lookahead frames
/// and a run starting in the lookahead is left to the next block. The next
/// block's first run is dropped when it is the same token and shares a frame
/// with the previous block's last run.
pub fn decode_overlap<M: BlockScorer>(
    model: &M,
    x: &FeatureMatrix,
    spec: &BlockSpec,
    cost: CostModel,
) -> Result<(Transcript, EmissionLog)> {
    // (token, absolute end) of the last emitted run
    let mut last: Option<(TokenId, usize)> = None;
    let walk = walk(model, x, spec, cost, |state, out| {
        state.a_hist.extend_from_slice(out.a_out);
        let w = out.block.local_window();
        let ext_end = (w.end + spec.n_r).min(out.block.frames.len());
        let labels = best_path(&out.posteriors.slice(w.start, ext_end));
        let offset = out.block.window.start;
        let mut emitted = Vec::new();
        for (i, (tok, s, e)) in token_runs(&labels).into_iter().enumerate() {
            let (s, e) = (s + offset, e + offset);
            if s >= out.block.window.end {
                break;
            }
            let merged = i == 0 && matches!(last, Some((t, end)) if t == tok && s < end);
            if !merged {
                emitted.push(tok);
            }
            let end = if merged {
                e.max(last.map_or(0, |l| l.1))
            } else {
                e
            };
            last = Some((tok, end));
        }
        state.y_out.extend_from_slice(&emitted);
        emitted
    })?;
    Ok(finish(walk))
}

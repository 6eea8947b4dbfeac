//! The semi-autoregressive streaming model.
//!
//! A recurrent LM subnetwork turns the normalized label history into a label
//! context vector. The contextual block encoder attends over one block of
//! frames plus two context slots (label, acoustic); the acoustic slot of the
//! last layer becomes the acoustic context of the next block. Without the
//! label slot the same encoder is the streaming NAR baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocking::{make_blocks, sample_block_size, Block, BlockSpec};
use crate::ctc;
use crate::error::{Error, Result};
use crate::grad::{AdamConfig, Graph, Matrix, ParamId, ParamStore, Var};
use crate::labels::{
    normalize, FeatureMatrix, FrameAlignment, PosteriorMatrix, TokenId, Transcript, BLANK,
};

pub const LM_PREFIX: &str = "lm.";

#[derive(Debug, Clone, PartialEq)]
pub struct LabelContext(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticContext(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// |V| including blank.
    pub vocab: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub d_ctx: usize,
    pub d_lm: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    /// SAR when true; the NAR baseline drops the label slot and the LM.
    pub label_context: bool,
    /// Intermediate CTC head after this many layers.
    pub interctc_layer: Option<usize>,
}

impl ModelConfig {
    pub fn toy(vocab: usize, feat_dim: usize) -> Self {
        Self {
            vocab,
            feat_dim,
            d_model: 32,
            d_ctx: 32,
            d_lm: 32,
            d_ff: 64,
            layers: 2,
            heads: 2,
            label_context: true,
            interctc_layer: Some(1),
        }
    }

    pub fn nar(mut self) -> Self {
        self.label_context = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.feat_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::input("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::input("d_model must be divisible by heads"));
        }
        if let Some(l) = self.interctc_layer {
            if l == 0 || l > self.layers {
                return Err(Error::input(format!(
                    "interctc tap {l} outside 1..={}",
                    self.layers
                )));
            }
        }
        Ok(())
    }
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = (3.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix { rows, cols, data }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), init_matrix(rng, din, dout, din))?,
            b: store.add_vector(format!("{name}.b"), vec![0.0; dout])?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.affine(x, w, b)
    }
}

/// Gated recurrent LM over `[BOS, tokens...]`.
#[derive(Debug, Clone)]
pub struct LmSubnetwork {
    vocab: usize,
    d_lm: usize,
    embed: ParamId,
    input: Linear,
    recur: ParamId,
    proj: Linear,
    head: Linear,
}

impl LmSubnetwork {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        d_lm: usize,
        d_ctx: usize,
    ) -> Result<Self> {
        Ok(Self {
            vocab,
            d_lm,
            embed: store.add("lm.embed", init_matrix(rng, vocab + 1, d_lm, d_lm))?,
            input: Linear::new(store, rng, "lm.input", d_lm, 3 * d_lm)?,
            recur: store.add("lm.recur.w", init_matrix(rng, d_lm, 3 * d_lm, d_lm))?,
            proj: Linear::new(store, rng, "lm.proj", d_lm, d_ctx)?,
            head: Linear::new(store, rng, "lm.head", d_lm, vocab)?,
        })
    }

    fn bos(&self) -> TokenId {
        self.vocab
    }

    /// Hidden state after each of `[BOS] ++ tokens`; entry `k` summarizes
    /// the first `k` tokens.
    fn hidden_states(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[TokenId],
    ) -> Result<Vec<Var>> {
        if let Some(&t) = tokens.iter().find(|&&t| t == BLANK || t >= self.vocab) {
            return Err(Error::input(format!(
                "LM input token {t} is not a real token"
            )));
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.bos());
        ids.extend_from_slice(tokens);
        let d = self.d_lm;
        let table = g.param(store, self.embed);
        let emb = g.gather_rows(table, &ids)?;
        let gx_all = self.input.apply(g, store, emb)?;
        let u = g.param(store, self.recur);
        let mut h = g.input(Matrix::zeros(1, d));
        let mut states = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let gx = g.slice_rows(gx_all, t, t + 1)?;
            let gh = g.matmul(h, u)?;
            let (xz, xr, xn) = (
                g.slice_cols(gx, 0, d)?,
                g.slice_cols(gx, d, 2 * d)?,
                g.slice_cols(gx, 2 * d, 3 * d)?,
            );
            let (hz, hr, hn) = (
                g.slice_cols(gh, 0, d)?,
                g.slice_cols(gh, d, 2 * d)?,
                g.slice_cols(gh, 2 * d, 3 * d)?,
            );
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, hn)?;
            let n = g.add(xn, rh)?;
            let n = g.tanh(n);
            let keep = g.mul(z, h)?;
            let one_minus_z = g.one_minus(z);
            let fresh = g.mul(one_minus_z, n)?;
            h = g.add(keep, fresh)?;
            states.push(h);
        }
        Ok(states)
    }

    fn context(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        self.proj.apply(g, store, hidden)
    }

    /// Mean next-token cross-entropy of one transcript (BOS-prefixed).
    fn sequence_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[TokenId],
    ) -> Result<Option<Var>> {
        if tokens.is_empty() {
            return Ok(None);
        }
        let states = self.hidden_states(g, store, &tokens[..tokens.len() - 1])?;
        let stacked = g.concat_rows(&states)?;
        let logits = self.head.apply(g, store, stacked)?;
        g.softmax_xent(logits, tokens).map(Some)
    }
}

fn lm_context_value(
    lm: &LmSubnetwork,
    store: &ParamStore,
    prefix: &[TokenId],
) -> Result<LabelContext> {
    let mut g = Graph::new();
    let states = lm.hidden_states(&mut g, store, prefix)?;
    let c = lm.context(&mut g, store, *states.last().expect("BOS state"))?;
    Ok(LabelContext(g.value(c).data.clone()))
}

/// Standalone LM subnetwork used for causal-LM pretraining.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    lm: LmSubnetwork,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 8,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl LanguageModel {
    pub fn new(vocab: usize, d_lm: usize, d_ctx: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let lm = LmSubnetwork::new(&mut params, &mut rng, vocab, d_lm, d_ctx)?;
        Ok(Self { lm, params })
    }

    /// Rebuilds the LM around parameters loaded from a checkpoint.
    pub fn from_params(
        vocab: usize,
        d_lm: usize,
        d_ctx: usize,
        loaded: &ParamStore,
    ) -> Result<Self> {
        let mut lm = Self::new(vocab, d_lm, d_ctx, 0)?;
        let copied = lm.params.load_values_from(loaded, LM_PREFIX)?;
        if copied != lm.params.len() {
            return Err(Error::input("checkpoint does not hold a complete LM"));
        }
        Ok(lm)
    }

    pub fn lm_context(&self, prefix: &[TokenId]) -> Result<LabelContext> {
        lm_context_value(&self.lm, &self.params, prefix)
    }

    /// Contexts after each prefix `tokens[..k]`, `k = 0..=len`, from one pass.
    pub fn prefix_contexts(&self, tokens: &[TokenId]) -> Result<Vec<LabelContext>> {
        let mut g = Graph::new();
        let states = self.lm.hidden_states(&mut g, &self.params, tokens)?;
        states
            .into_iter()
            .map(|h| {
                let c = self.lm.context(&mut g, &self.params, h)?;
                Ok(LabelContext(g.value(c).data.clone()))
            })
            .collect()
    }

    /// exp of the mean next-token cross-entropy over all tokens in `corpus`.
    pub fn perplexity(&self, corpus: &[Transcript]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for y in corpus {
            let mut g = Graph::new();
            if let Some(loss) = self.lm.sequence_loss(&mut g, &self.params, &y.tokens)? {
                nll += g.value(loss).scalar() * y.len() as f64;
                count += y.len();
            }
        }
        if count == 0 {
            return Err(Error::input("perplexity of an empty corpus"));
        }
        Ok((nll / count as f64).exp())
    }

    /// Causal next-token training. Returns corpus perplexity before training
    /// followed by one entry per epoch.
    pub fn pretrain(&mut self, corpus: &[Transcript], cfg: &LmTrainConfig) -> Result<Vec<f64>> {
        if corpus.iter().all(|y| y.is_empty()) {
            return Err(Error::input("LM pretraining needs a nonempty corpus"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut history = vec![self.perplexity(corpus)?];
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch.max(1)) {
                for &i in chunk {
                    let mut g = Graph::new();
                    if let Some(loss) =
                        self.lm
                            .sequence_loss(&mut g, &self.params, &corpus[i].tokens)?
                    {
                        let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                        g.backward(scaled, &mut self.params)?;
                    }
                }
                self.params.adam_step(&cfg.adam)?;
            }
            let ppl = self.perplexity(corpus)?;
            if !ppl.is_finite() {
                return Err(Error::Numerical(format!("LM perplexity became {ppl}")));
            }
            history.push(ppl);
        }
        Ok(history)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct BlockEncoder {
    input: Linear,
    label_slot: Option<Linear>,
    acoustic_slot: Linear,
    acoustic_init: ParamId,
    layers: Vec<EncoderLayer>,
    context_out: Linear,
    out: Linear,
    inter: Option<Linear>,
}

/// Graph handles produced by one block pass.
#[derive(Debug, Clone, Copy)]
pub struct BlockPass {
    /// Final-layer frame encodings `h_b`, one row per block frame.
    pub hidden: Var,
    pub logits: Var,
    pub inter_logits: Option<Var>,
    pub next_acoustic: Var,
}

/// Graph handles for a whole utterance assembled from central windows.
#[derive(Debug, Clone, Copy)]
pub struct UtterancePass {
    pub logits: Var,
    pub inter_logits: Option<Var>,
}

fn positional(rows: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, d);
    for p in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            m.data[p * d + 2 * i] = (p as f64 * freq).sin();
            m.data[p * d + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct SarModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    lm: Option<LmSubnetwork>,
    enc: BlockEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Frame-level cross-entropy against an alignment.
    Ce,
    /// Cross-entropy mixed with intermediate CTC.
    CeInterCtc,
    /// Alignment-free CTC (NAR baseline).
    Ctc,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ce+interctc" => Ok(LossMode::CeInterCtc),
            "ctc" => Ok(LossMode::Ctc),
            other => Err(Error::input(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl SarModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let lm = if c.label_context {
            Some(LmSubnetwork::new(
                &mut store, &mut rng, c.vocab, c.d_lm, c.d_ctx,
            )?)
        } else {
            None
        };
        let input = Linear::new(&mut store, &mut rng, "enc.input", c.feat_dim, c.d_model)?;
        let label_slot = if c.label_context {
            Some(Linear::new(
                &mut store,
                &mut rng,
                "enc.label_slot",
                c.d_ctx,
                c.d_model,
            )?)
        } else {
            None
        };
        let acoustic_slot = Linear::new(
            &mut store,
            &mut rng,
            "enc.acoustic_slot",
            c.d_ctx,
            c.d_model,
        )?;
        // a zero start context would give the first block a constant slot row
        let acoustic_init = store.add_vector(
            "enc.acoustic_init",
            (0..c.d_ctx).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )?;
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("enc.layer{l}");
            layers.push(EncoderLayer {
                q: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{p}.q"),
                    c.d_model,
                    c.d_model,
                )?,
                k: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{p}.k"),
                    c.d_model,
                    c.d_model,
                )?,
                v: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{p}.v"),
                    c.d_model,
                    c.d_model,
                )?,
                o: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("{p}.o"),
                    c.d_model,
                    c.d_model,
                )?,
                ff1: Linear::new(&mut store, &mut rng, &format!("{p}.ff1"), c.d_model, c.d_ff)?,
                ff2: Linear::new(&mut store, &mut rng, &format!("{p}.ff2"), c.d_ff, c.d_model)?,
            });
        }
        let context_out = Linear::new(&mut store, &mut rng, "enc.context_out", c.d_model, c.d_ctx)?;
        let out = Linear::new(&mut store, &mut rng, "out", c.d_model, c.vocab)?;
        let inter = match c.interctc_layer {
            Some(_) => Some(Linear::new(
                &mut store, &mut rng, "inter", c.d_model, c.vocab,
            )?),
            None => None,
        };
        Ok(Self {
            config,
            params: store,
            lm,
            enc: BlockEncoder {
                input,
                label_slot,
                acoustic_slot,
                acoustic_init,
                layers,
                context_out,
                out,
                inter,
            },
        })
    }

    /// Rebuilds a model from checkpointed parameters.
    pub fn from_params(config: ModelConfig, loaded: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let copied = model.params.load_values_from(loaded, "")?;
        if copied != model.params.len() {
            return Err(Error::input(format!(
                "checkpoint holds {copied} of {} model parameters",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn uses_label_context(&self) -> bool {
        self.lm.is_some()
    }

    /// Copies pretrained LM weights into the LM subnetwork.
    pub fn load_lm(&mut self, lm: &LanguageModel) -> Result<()> {
        if self.lm.is_none() {
            return Err(Error::input("NAR model has no LM subnetwork"));
        }
        self.params.load_values_from(&lm.params, LM_PREFIX)?;
        Ok(())
    }

    pub fn freeze_lm(&mut self, frozen: bool) {
        self.params.set_frozen(LM_PREFIX, frozen);
    }

    pub fn lm_context(&self, prefix: &[TokenId]) -> Result<LabelContext> {
        let lm = self
            .lm
            .as_ref()
            .ok_or_else(|| Error::input("NAR model has no LM subnetwork"))?;
        lm_context_value(lm, &self.params, prefix)
    }

    pub fn initial_acoustic_context(&self) -> AcousticContext {
        AcousticContext(self.params.get(self.enc.acoustic_init).value.data.clone())
    }

    /// Label-context vars for each prefix length in `prefix_lens`, all
    /// cut from one LM pass over `tokens`.
    fn label_contexts(
        &self,
        g: &mut Graph,
        tokens: &[TokenId],
        prefix_lens: &[usize],
    ) -> Result<Option<Vec<Var>>> {
        let Some(lm) = &self.lm else { return Ok(None) };
        let longest = prefix_lens.iter().copied().max().unwrap_or(0);
        let states = lm.hidden_states(g, &self.params, &tokens[..longest])?;
        let mut out = Vec::with_capacity(prefix_lens.len());
        for &k in prefix_lens {
            out.push(lm.context(g, &self.params, states[k])?);
        }
        Ok(Some(out))
    }

    /// One contextual-block-encoder pass over `frames` (`n x D`).
    pub fn encode_block_graph(
        &self,
        g: &mut Graph,
        frames: Var,
        label_ctx: Option<Var>,
        acoustic_ctx: Var,
    ) -> Result<BlockPass> {
        let c = &self.config;
        let store = &self.params;
        let (n, d) = g.shape(frames);
        if n == 0 {
            return Err(Error::input("empty block"));
        }
        if d != c.feat_dim {
            return Err(Error::input(format!(
                "block has {d} features, model expects {}",
                c.feat_dim
            )));
        }
        let x = self.enc.input.apply(g, store, frames)?;
        let pos = g.input(positional(n, c.d_model));
        let x = g.add(x, pos)?;
        let mut slots = Vec::with_capacity(3);
        match (&self.enc.label_slot, label_ctx) {
            (Some(proj), Some(ctx)) => slots.push(proj.apply(g, store, ctx)?),
            (None, None) => {}
            _ => return Err(Error::input("label context does not match model kind")),
        }
        let acoustic_row = slots.len();
        slots.push(self.enc.acoustic_slot.apply(g, store, acoustic_ctx)?);
        slots.push(x);
        let mut x = g.concat_rows(&slots)?;
        let n_slots = acoustic_row + 1;

        let dh = c.d_model / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut inter_logits = None;
        for (l, layer) in self.enc.layers.iter().enumerate() {
            let h = g.layer_norm(x);
            let q = layer.q.apply(g, store, h)?;
            let k = layer.k.apply(g, store, h)?;
            let v = layer.v.apply(g, store, h)?;
            let mut heads = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let (qh, kh, vh) = (
                    g.slice_cols(q, lo, hi)?,
                    g.slice_cols(k, lo, hi)?,
                    g.slice_cols(v, lo, hi)?,
                );
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let p = g.softmax_rows(s);
                heads.push(g.matmul(p, vh)?);
            }
            let att = g.concat_cols(&heads)?;
            let att = layer.o.apply(g, store, att)?;
            x = g.add(x, att)?;
            let h = g.layer_norm(x);
            let f = layer.ff1.apply(g, store, h)?;
            let f = g.relu(f);
            let f = layer.ff2.apply(g, store, f)?;
            x = g.add(x, f)?;
            if c.interctc_layer == Some(l + 1) {
                if let Some(head) = &self.enc.inter {
                    let h = g.layer_norm(x);
                    let frames_h = g.slice_rows(h, n_slots, n_slots + n)?;
                    inter_logits = Some(head.apply(g, store, frames_h)?);
                }
            }
        }
        let h = g.layer_norm(x);
        let hidden = g.slice_rows(h, n_slots, n_slots + n)?;
        let logits = self.enc.out.apply(g, store, hidden)?;
        let ac = g.slice_rows(h, acoustic_row, acoustic_row + 1)?;
        let ac = self.enc.context_out.apply(g, store, ac)?;
        let next_acoustic = g.tanh(ac);
        Ok(BlockPass {
            hidden,
            logits,
            inter_logits,
            next_acoustic,
        })
    }

    /// Value-level block encoding: `(h_b, next acoustic context)`.
    pub fn encode_block(
        &self,
        frames: &Matrix,
        label_ctx: Option<&LabelContext>,
        acoustic_ctx: &AcousticContext,
    ) -> Result<(Matrix, AcousticContext)> {
        let mut g = Graph::new();
        let f = g.input(frames.clone());
        let lc = label_ctx.map(|c| g.input(Matrix::row_vector(c.0.clone())));
        let ac = g.input(Matrix::row_vector(acoustic_ctx.0.clone()));
        let pass = self.encode_block_graph(&mut g, f, lc, ac)?;
        Ok((
            g.value(pass.hidden).clone(),
            AcousticContext(g.value(pass.next_acoustic).data.clone()),
        ))
    }

    /// Posteriors for every frame of `block` given the label prefix emitted
    /// so far; advances `acoustic` to the next block's context.
    pub fn score_block(
        &self,
        x: &FeatureMatrix,
        block: &Block,
        label_prefix: &[TokenId],
        acoustic: &mut AcousticContext,
    ) -> Result<PosteriorMatrix> {
        let mut g = Graph::new();
        let n = block.frames.len();
        let frames = g.input(Matrix::from_vec(
            n,
            x.dim(),
            x.rows(block.frames.start, block.frames.end).to_vec(),
        )?);
        let label = match &self.lm {
            Some(lm) => {
                let states = lm.hidden_states(&mut g, &self.params, label_prefix)?;
                Some(lm.context(&mut g, &self.params, *states.last().expect("BOS state"))?)
            }
            None => None,
        };
        let ac = g.input(Matrix::row_vector(acoustic.0.clone()));
        let pass = self.encode_block_graph(&mut g, frames, label, ac)?;
        *acoustic = AcousticContext(g.value(pass.next_acoustic).data.clone());
        PosteriorMatrix::from_logits(n, self.config.vocab, g.value(pass.logits).data.clone())
    }

    /// Teacher-forced pass: block `b` sees the label context of the gold
    /// alignment up to the start of its central window.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: &FeatureMatrix,
        alignment: Option<&FrameAlignment>,
        spec: &BlockSpec,
    ) -> Result<UtterancePass> {
        let t_total = x.frames();
        if let Some(a) = alignment {
            if a.len() != t_total {
                return Err(Error::input(format!(
                    "alignment of {} frames for {t_total} feature frames",
                    a.len()
                )));
            }
        }
        let blocks = make_blocks(t_total, spec)?;
        let label_ctx = if self.lm.is_some() {
            let a = alignment.ok_or_else(|| Error::input("SAR forward needs an alignment"))?;
            let history =
                normalize(&a.labels[..blocks.last().expect("at least one block").window.start]);
            let lens: Vec<usize> = blocks
                .iter()
                .map(|b| normalize(&a.labels[..b.window.start]).len())
                .collect();
            self.label_contexts(g, &history, &lens)?
        } else {
            None
        };

        let all_frames = g.input(Matrix::from_vec(t_total, x.dim(), x.data().to_vec())?);
        let init = g.param(&self.params, self.enc.acoustic_init);
        let mut acoustic = init;
        let mut rows = Vec::with_capacity(blocks.len());
        let mut inter_rows = Vec::with_capacity(blocks.len());
        for (i, block) in blocks.iter().enumerate() {
            let frames = g.slice_rows(all_frames, block.frames.start, block.frames.end)?;
            let lc = label_ctx.as_ref().map(|v| v[i]);
            let pass = self.encode_block_graph(g, frames, lc, acoustic)?;
            acoustic = pass.next_acoustic;
            let w = block.local_window();
            rows.push(g.slice_rows(pass.logits, w.start, w.end)?);
            if let Some(il) = pass.inter_logits {
                inter_rows.push(g.slice_rows(il, w.start, w.end)?);
            }
        }
        let logits = g.concat_rows(&rows)?;
        let inter_logits = if inter_rows.is_empty() {
            None
        } else {
            Some(g.concat_rows(&inter_rows)?)
        };
        Ok(UtterancePass {
            logits,
            inter_logits,
        })
    }

    pub fn forward_teacher_forced(
        &self,
        x: &FeatureMatrix,
        alignment: &FrameAlignment,
        spec: &BlockSpec,
    ) -> Result<PosteriorMatrix> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, x, Some(alignment), spec)?;
        PosteriorMatrix::from_logits(
            x.frames(),
            self.config.vocab,
            g.value(pass.logits).data.clone(),
        )
    }

    /// Frame posteriors of the NAR encoder (no label context needed).
    pub fn forward_nar(&self, x: &FeatureMatrix, spec: &BlockSpec) -> Result<PosteriorMatrix> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, x, None, spec)?;
        PosteriorMatrix::from_logits(
            x.frames(),
            self.config.vocab,
            g.value(pass.logits).data.clone(),
        )
    }
}

/// CTC on a logits node, normalized per frame; returns a scalar node.
pub fn ctc_loss_node(g: &mut Graph, logits: Var, y: &[TokenId]) -> Result<Var> {
    let lp = g.log_softmax_rows(logits);
    let (t, v) = g.shape(lp);
    let post = PosteriorMatrix::from_log_probs(t, v, g.value(lp).data.clone())?;
    let ctc::CtcLoss { loss, grad } = ctc::ctc_loss(&post, y)?;
    let inv_t = 1.0 / t as f64;
    let grad = Matrix::from_vec(t, v, grad.into_iter().map(|x| x * inv_t).collect())?;
    g.precomputed_loss(lp, loss * inv_t, grad)
}

/// Training objective over an utterance pass.
pub fn compute_loss(
    g: &mut Graph,
    pass: &UtterancePass,
    alignment: Option<&FrameAlignment>,
    transcript: &Transcript,
    mode: LossMode,
    interctc_weight: f64,
) -> Result<Var> {
    let need_alignment =
        || alignment.ok_or_else(|| Error::input("cross-entropy training needs alignments"));
    match mode {
        LossMode::Ctc => ctc_loss_node(g, pass.logits, &transcript.tokens),
        LossMode::Ce => g.softmax_xent(pass.logits, &need_alignment()?.labels),
        LossMode::CeInterCtc => {
            let ce = g.softmax_xent(pass.logits, &need_alignment()?.labels)?;
            if interctc_weight == 0.0 {
                return Ok(ce);
            }
            let inter = pass
                .inter_logits
                .ok_or_else(|| Error::input("model has no intermediate CTC head"))?;
            let ictc = ctc_loss_node(g, inter, &transcript.tokens)?;
            let a = g.scale(ce, 1.0 - interctc_weight);
            let b = g.scale(ictc, interctc_weight);
            g.add(a, b)
        }
    }
}

/// One training example: features, transcript, and (for CE) an alignment.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub features: &'a FeatureMatrix,
    pub transcript: &'a Transcript,
    pub alignment: Option<&'a FrameAlignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub spec: BlockSpec,
    /// Per-utterance block size range for random-block regularization.
    pub random_block: Option<(usize, usize)>,
    pub interctc_weight: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Ce,
            spec: BlockSpec::DEFAULT,
            random_block: None,
            interctc_weight: 0.3,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// One shuffled pass with an optimizer step per utterance; returns the mean
/// loss.
pub fn train_epoch(
    model: &mut SarModel,
    data: &[TrainItem<'_>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for i in order {
        let item = &data[i];
        let spec = match cfg.random_block {
            Some((lo, hi)) => sample_block_size(rng, lo, hi, &cfg.spec)?,
            None => cfg.spec,
        };
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, item.features, item.alignment, &spec)?;
        let loss = compute_loss(
            &mut g,
            &pass,
            item.alignment,
            item.transcript,
            cfg.mode,
            cfg.interctc_weight,
        )?;
        let value = g.value(loss).scalar();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {value} on {}",
                item.transcript.utt_id
            )));
        }
        total += value;
        g.backward(loss, &mut model.params)?;
        model.params.adam_step(&cfg.adam)?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_check;
    use crate::labels::Vocab;

    fn features(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::new(
            "u",
            t,
            d,
            (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            0.01,
        )
        .unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ctx: 16,
            d_lm: 16,
            d_ff: 32,
            ..ModelConfig::toy(5, 8)
        }
    }

    #[test]
    fn lm_empty_prefix_is_post_bos_projection() {
        let m = SarModel::new(small_config(), 1).unwrap();
        let c = m.lm_context(&[]).unwrap();
        assert_eq!(c.0.len(), 16);
        assert!(c.0.iter().all(|v| v.is_finite()));
        assert!(m.lm_context(&[0]).is_err());
    }

    #[test]
    fn lm_is_causal_and_order_sensitive() {
        let m = SarModel::new(small_config(), 2).unwrap();
        let lm = m.lm.as_ref().unwrap();
        let mut g = Graph::new();
        let a = lm.hidden_states(&mut g, &m.params, &[1, 2, 3]).unwrap();
        let b = lm.hidden_states(&mut g, &m.params, &[1, 2, 4]).unwrap();
        for k in 0..3 {
            assert_eq!(g.value(a[k]), g.value(b[k]));
        }
        assert_ne!(g.value(a[3]), g.value(b[3]));
        assert_ne!(
            m.lm_context(&[1, 2]).unwrap(),
            m.lm_context(&[2, 1]).unwrap()
        );
    }

    #[test]
    fn zero_weights_give_constant_rows() {
        let mut m = SarModel::new(small_config(), 3).unwrap();
        let out = m.params.id("out.b").unwrap();
        let ids: Vec<ParamId> = m.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = m.params.get_mut(id);
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        m.params.get_mut(out).value.data = vec![0.5, -0.5, 1.0, 0.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = features(&mut rng, 6, 8);
        let blocks = make_blocks(6, &BlockSpec::DEFAULT).unwrap();
        let mut ac = m.initial_acoustic_context();
        let post = m.score_block(&x, &blocks[0], &[], &mut ac).unwrap();
        for t in 1..6 {
            assert_eq!(post.row(t), post.row(0));
        }
    }

    #[test]
    fn encode_block_is_deterministic_and_label_sensitive() {
        let m = SarModel::new(small_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = features(&mut rng, 10, 8);
        let frames = Matrix::from_vec(10, 8, x.data().to_vec()).unwrap();
        let ac = m.initial_acoustic_context();
        let c1 = m.lm_context(&[1]).unwrap();
        let (h1, a1) = m.encode_block(&frames, Some(&c1), &ac).unwrap();
        let (h2, a2) = m.encode_block(&frames, Some(&c1), &ac).unwrap();
        assert_eq!((h1.clone(), a1), (h2, a2));
        assert_eq!(h1.shape(), (10, 16));

        let mut c2 = c1.clone();
        c2.0[0] += 1e-4;
        let (h3, _) = m.encode_block(&frames, Some(&c2), &ac).unwrap();
        let diff: f64 = h1
            .data
            .iter()
            .zip(&h3.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "h_b insensitive to c_lm");
        assert!(m
            .encode_block(&Matrix::zeros(0, 8), Some(&c1), &ac)
            .is_err());
    }

    #[test]
    fn teacher_forcing_prefix_ignores_later_labels() {
        let m = SarModel::new(small_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = BlockSpec::new(8, 4, 2, 2).unwrap();
        let x = features(&mut rng, 16, 8);
        let v = Vocab::synthetic(4);
        let labels: Vec<TokenId> = (0..16).map(|i| [1, 1, 0, 2, 3, 3, 0, 4][i % 8]).collect();
        let a = FrameAlignment::new("u", labels.clone(), &v).unwrap();
        let p = m.forward_teacher_forced(&x, &a, &spec).unwrap();
        // Block 2's window starts at frame 6 (0-based), so frames >= 6 do not
        // feed block 2; changing frame 15 only touches no prefix at all.
        let mut changed = labels.clone();
        changed[15] = 1;
        let p2 = m
            .forward_teacher_forced(&x, &FrameAlignment::new("u", changed, &v).unwrap(), &spec)
            .unwrap();
        assert_eq!(p, p2);
        // Changing a frame inside block 1's window changes later blocks.
        let mut changed = labels;
        changed[3] = 4;
        let p3 = m
            .forward_teacher_forced(&x, &FrameAlignment::new("u", changed, &v).unwrap(), &spec)
            .unwrap();
        assert_eq!(p.slice(0, 6), p3.slice(0, 6));
        assert_ne!(p.slice(6, 16), p3.slice(6, 16));
    }

    #[test]
    fn loss_modes() {
        let mut g = Graph::new();
        let logits = g.input(Matrix::zeros(3, 4));
        let pass = UtterancePass {
            logits,
            inter_logits: Some(logits),
        };
        let v = Vocab::synthetic(3);
        let a = FrameAlignment::new("u", vec![1, 0, 2], &v).unwrap();
        let y = Transcript::new("u", vec![1, 2], &v).unwrap();
        let ce = compute_loss(&mut g, &pass, Some(&a), &y, LossMode::Ce, 0.3).unwrap();
        assert!((g.value(ce).scalar() - 4f64.ln()).abs() < 1e-12);
        let ce0 = compute_loss(&mut g, &pass, Some(&a), &y, LossMode::CeInterCtc, 0.0).unwrap();
        assert_eq!(
            g.value(ce0).scalar().to_bits(),
            g.value(ce).scalar().to_bits()
        );
        let ctc = compute_loss(&mut g, &pass, Some(&a), &y, LossMode::Ctc, 0.3).unwrap();
        let mix = compute_loss(&mut g, &pass, Some(&a), &y, LossMode::CeInterCtc, 0.3).unwrap();
        let expect = 0.7 * g.value(ce).scalar() + 0.3 * g.value(ctc).scalar();
        assert!((g.value(mix).scalar() - expect).abs() < 1e-12);
        assert!(compute_loss(&mut g, &pass, None, &y, LossMode::Ce, 0.3).is_err());

        let one_hot = g.input(
            Matrix::from_vec(3, 4, {
                let mut d = vec![-1e6; 12];
                d[1] = 0.0;
                d[4] = 0.0;
                d[4 * 2 + 2] = 0.0;
                d
            })
            .unwrap(),
        );
        let pass = UtterancePass {
            logits: one_hot,
            inter_logits: None,
        };
        let ce = compute_loss(&mut g, &pass, Some(&a), &y, LossMode::Ce, 0.3).unwrap();
        assert!(g.value(ce).scalar().abs() < 1e-12);
    }

    #[test]
    fn two_block_gradient_check() {
        let cfg = ModelConfig {
            d_model: 8,
            d_ctx: 8,
            d_lm: 8,
            d_ff: 8,
            ..ModelConfig::toy(4, 4)
        };
        let mut m = SarModel::new(cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = features(&mut rng, 12, 4);
        let v = Vocab::synthetic(3);
        let a = FrameAlignment::new("u", vec![1, 1, 0, 2, 2, 3, 0, 3, 1, 1, 0, 2], &v).unwrap();
        let y = Transcript::new("u", normalize(&a.labels), &v).unwrap();
        let spec = BlockSpec::new(10, 6, 2, 2).unwrap();
        assert_eq!(make_blocks(12, &spec).unwrap().len(), 2);
        let shell = m.clone();
        let report = finite_diff_check(
            &mut m.params,
            |g, store| {
                let mut model = shell.clone();
                model.params = store.clone();
                let pass = model.forward_graph(g, &x, Some(&a), &spec)?;
                compute_loss(g, &pass, Some(&a), &y, LossMode::CeInterCtc, 0.3)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max err {}: {:?}",
            report.max_error(),
            report.entries
        );
    }

    #[test]
    fn pretrain_memorizes_single_sequence() {
        let v = Vocab::synthetic(4);
        let corpus = vec![Transcript::new("u", vec![1, 3, 2, 4, 1], &v).unwrap(); 4];
        let mut lm = LanguageModel::new(v.len(), 16, 16, 0).unwrap();
        let hist = lm
            .pretrain(
                &corpus,
                &LmTrainConfig {
                    epochs: 50,
                    batch: 1,
                    ..LmTrainConfig::default()
                },
            )
            .unwrap();
        assert!(hist.last().unwrap() < &1.05, "{hist:?}");
        assert!(hist.last().unwrap() <= hist.first().unwrap());
        assert!(lm.pretrain(&[], &LmTrainConfig::default()).is_err());
    }

    #[test]
    fn overfits_one_utterance() {
        let cfg = small_config();
        let mut m = SarModel::new(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = features(&mut rng, 30, 8);
        let v = Vocab::synthetic(4);
        let labels: Vec<TokenId> = (0..30)
            .map(|i| [1, 1, 0, 2, 3, 3, 3, 0, 4, 4][i % 10])
            .collect();
        let a = FrameAlignment::new("u", labels.clone(), &v).unwrap();
        let y = Transcript::new("u", normalize(&labels), &v).unwrap();
        let items = [TrainItem {
            features: &x,
            transcript: &y,
            alignment: Some(&a),
        }];
        let tc = TrainConfig {
            spec: BlockSpec::new(12, 6, 2, 4).unwrap(),
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut loss = f64::INFINITY;
        for _ in 0..30 {
            loss = train_epoch(&mut m, &items, &tc, &mut rng).unwrap();
        }
        assert!(loss < 0.1, "loss {loss}");
    }
}

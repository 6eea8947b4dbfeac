//! Line-oriented run configuration: `section.key=value`, `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::blocking::BlockSpec;
use crate::decode::DecoderKind;
use crate::error::{Error, Result};
use crate::eval::CostModel;
use crate::grad::AdamConfig;
use crate::model::{LmTrainConfig, LossMode, ModelConfig, TrainConfig};
use crate::synth::CorpusConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub d_m: usize,
    pub d_ctx: usize,
    pub d_lm: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    /// 0 disables the intermediate CTC head.
    pub interctc_layer: usize,
    pub interctc_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub nar_epochs: usize,
    pub seed: u64,
    pub mode: LossMode,
    pub random_block: bool,
    pub random_block_min: usize,
    pub random_block_max: usize,
    pub lr: f64,
    pub nar_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSettings {
    pub pretrain: bool,
    pub external_multiplier: usize,
    pub epochs: usize,
    pub lr: f64,
    pub freeze: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSettings {
    pub decoders: Vec<DecoderKind>,
    /// `system:decoder` row that p-values are computed against.
    pub baseline: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub block: BlockSpec,
    pub model: ModelDims,
    pub train: TrainSettings,
    pub lm: LmSettings,
    pub decode: DecodeSettings,
    pub cost: CostModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig {
                seed: 7,
                ..CorpusConfig::default()
            },
            block: BlockSpec::DEFAULT,
            model: ModelDims {
                d_m: 32,
                d_ctx: 32,
                d_lm: 32,
                d_ff: 64,
                layers: 2,
                heads: 2,
                interctc_layer: 1,
                interctc_weight: 0.3,
            },
            train: TrainSettings {
                epochs: 3,
                nar_epochs: 3,
                seed: 7,
                mode: LossMode::CeInterCtc,
                random_block: true,
                random_block_min: 35,
                random_block_max: 45,
                lr: 2e-3,
                nar_lr: 5e-3,
            },
            lm: LmSettings {
                pretrain: true,
                external_multiplier: 10,
                epochs: 3,
                lr: 3e-3,
                freeze: false,
            },
            decode: DecodeSettings {
                decoders: DecoderKind::ALL.to_vec(),
                baseline: "nar-ce:overlap".to_string(),
            },
            cost: CostModel::Synthetic { c: 1e-5 },
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn mode_name(m: LossMode) -> &'static str {
    match m {
        LossMode::Ce => "ce",
        LossMode::CeInterCtc => "ce+interctc",
        LossMode::Ctc => "ctc",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut cost_mode: Option<(usize, String)> = None;
        let mut cost_c: Option<(usize, f64)> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config {
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected section.key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "cost.mode" => cost_mode = Some((line_no, value.to_string())),
                "cost.c" => cost_c = Some((line_no, parse_value(value).map_err(err)?)),
                _ => cfg.set(key, value).map_err(err)?,
            }
        }
        let c = match (cost_c, &cfg.cost) {
            (Some((_, c)), _) => c,
            (None, CostModel::Synthetic { c }) => *c,
            (None, CostModel::WallClock) => 0.0,
        };
        cfg.cost = match cost_mode {
            Some((_, m)) if m == "wall-clock" => CostModel::WallClock,
            Some((line, m)) if m != "synthetic" => {
                return Err(Error::Config {
                    line,
                    message: format!("cost.mode must be synthetic or wall-clock, got {m:?}"),
                })
            }
            _ => CostModel::synthetic(c).map_err(|e| Error::Config {
                line: cost_c.map_or(0, |x| x.0),
                message: e.to_string(),
            })?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let c = &mut self.corpus;
        match key {
            "corpus.vocab_size" => c.vocab_size = parse_value(v)?,
            "corpus.feat_dim" => c.feat_dim = parse_value(v)?,
            "corpus.dur_min" => c.dur_min = parse_value(v)?,
            "corpus.dur_max" => c.dur_max = parse_value(v)?,
            "corpus.gap_prob" => c.gap_prob = parse_value(v)?,
            "corpus.bigram_concentration" => c.bigram_concentration = parse_value(v)?,
            "corpus.noise" => c.noise = parse_value(v)?,
            "corpus.prototype_scale" => c.prototype_scale = parse_value(v)?,
            "corpus.len_min" => c.len_min = parse_value(v)?,
            "corpus.len_max" => c.len_max = parse_value(v)?,
            "corpus.train_size" => c.train_size = parse_value(v)?,
            "corpus.test_size" => c.test_size = parse_value(v)?,
            "corpus.frame_duration" => c.frame_duration = parse_value(v)?,
            "corpus.seed" => c.seed = parse_value(v)?,
            "block.l_block" => self.block.l_block = parse_value(v)?,
            "block.n_l" => self.block.n_l = parse_value(v)?,
            "block.n_r" => self.block.n_r = parse_value(v)?,
            "model.d_m" => self.model.d_m = parse_value(v)?,
            "model.d_ctx" => self.model.d_ctx = parse_value(v)?,
            "model.d_lm" => self.model.d_lm = parse_value(v)?,
            "model.d_ff" => self.model.d_ff = parse_value(v)?,
            "model.layers" => self.model.layers = parse_value(v)?,
            "model.heads" => self.model.heads = parse_value(v)?,
            "model.interctc_layer" => self.model.interctc_layer = parse_value(v)?,
            "model.interctc_weight" => self.model.interctc_weight = parse_value(v)?,
            "train.epochs" => self.train.epochs = parse_value(v)?,
            "train.nar_epochs" => self.train.nar_epochs = parse_value(v)?,
            "train.seed" => self.train.seed = parse_value(v)?,
            "train.mode" => self.train.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "train.random_block" => self.train.random_block = parse_bool(v)?,
            "train.random_block_min" => self.train.random_block_min = parse_value(v)?,
            "train.random_block_max" => self.train.random_block_max = parse_value(v)?,
            "train.lr" => self.train.lr = parse_value(v)?,
            "train.nar_lr" => self.train.nar_lr = parse_value(v)?,
            "lm.pretrain" => self.lm.pretrain = parse_bool(v)?,
            "lm.external_multiplier" => self.lm.external_multiplier = parse_value(v)?,
            "lm.epochs" => self.lm.epochs = parse_value(v)?,
            "lm.lr" => self.lm.lr = parse_value(v)?,
            "lm.freeze" => self.lm.freeze = parse_bool(v)?,
            "decode.decoders" => {
                self.decode.decoders = v
                    .split(',')
                    .map(|d| d.trim().parse().map_err(|e: Error| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "decode.baseline" => self.decode.baseline = v.to_string(),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Err(Error::Config { line: 0, message });
        self.corpus.validate().or_else(|e| bad(e.to_string()))?;
        let b = &self.block;
        if b.l_block <= b.n_l + b.n_r {
            return bad(format!("block.l_block={} leaves no hop", b.l_block));
        }
        let m = &self.model;
        if m.interctc_layer > m.layers {
            return bad("model.interctc_layer exceeds model.layers".into());
        }
        if !(0.0..=1.0).contains(&m.interctc_weight) {
            return bad("model.interctc_weight outside [0, 1]".into());
        }
        self.model_config(true)
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        let t = &self.train;
        if t.random_block && t.random_block_min > t.random_block_max {
            return bad("train.random_block_min exceeds train.random_block_max".into());
        }
        if t.random_block && t.random_block_min <= b.n_l + b.n_r {
            return bad("train.random_block_min leaves no hop".into());
        }
        if t.mode == LossMode::Ctc {
            return bad("train.mode=ctc is reserved for the NAR alignment model".into());
        }
        if self.decode.decoders.is_empty() {
            return bad("decode.decoders is empty".into());
        }
        Ok(())
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec::from_past_future(self.block.l_block, self.block.n_l, self.block.n_r)
            .expect("validated block spec")
    }

    pub fn model_config(&self, label_context: bool) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab: self.corpus.vocab_size + 1,
            feat_dim: self.corpus.feat_dim,
            d_model: m.d_m,
            d_ctx: m.d_ctx,
            d_lm: m.d_lm,
            d_ff: m.d_ff,
            layers: m.layers,
            heads: m.heads,
            label_context,
            interctc_layer: (m.interctc_layer > 0).then_some(m.interctc_layer),
        }
    }

    /// Training settings for the CE-trained SAR and NAR systems.
    pub fn ce_train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.train.mode,
            spec: self.spec(),
            random_block: self
                .train
                .random_block
                .then_some((self.train.random_block_min, self.train.random_block_max)),
            interctc_weight: self.model.interctc_weight,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
        }
    }

    /// Training settings for the CTC model that produces forced alignments.
    pub fn ctc_train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: LossMode::Ctc,
            adam: AdamConfig {
                lr: self.train.nar_lr,
                ..AdamConfig::default()
            },
            ..self.ce_train_config()
        }
    }

    pub fn lm_train_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.lm.epochs,
            adam: AdamConfig {
                lr: self.lm.lr,
                ..AdamConfig::default()
            },
            seed: self.train.seed,
            ..LmTrainConfig::default()
        }
    }

    /// Sets both the corpus and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key in a fixed order; parsing this text gives back `self`.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let t = &self.train;
        let (cost_mode, cost_c) = match self.cost {
            CostModel::WallClock => ("wall-clock", 0.0),
            CostModel::Synthetic { c } => ("synthetic", c),
        };
        let decoders: Vec<&str> = self.decode.decoders.iter().map(|d| d.name()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("corpus.vocab_size", c.vocab_size.to_string()),
            ("corpus.feat_dim", c.feat_dim.to_string()),
            ("corpus.dur_min", c.dur_min.to_string()),
            ("corpus.dur_max", c.dur_max.to_string()),
            ("corpus.gap_prob", c.gap_prob.to_string()),
            (
                "corpus.bigram_concentration",
                c.bigram_concentration.to_string(),
            ),
            ("corpus.noise", c.noise.to_string()),
            ("corpus.prototype_scale", c.prototype_scale.to_string()),
            ("corpus.len_min", c.len_min.to_string()),
            ("corpus.len_max", c.len_max.to_string()),
            ("corpus.train_size", c.train_size.to_string()),
            ("corpus.test_size", c.test_size.to_string()),
            ("corpus.frame_duration", c.frame_duration.to_string()),
            ("corpus.seed", c.seed.to_string()),
            ("block.l_block", self.block.l_block.to_string()),
            ("block.n_l", self.block.n_l.to_string()),
            ("block.n_r", self.block.n_r.to_string()),
            ("model.d_m", m.d_m.to_string()),
            ("model.d_ctx", m.d_ctx.to_string()),
            ("model.d_lm", m.d_lm.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.interctc_layer", m.interctc_layer.to_string()),
            ("model.interctc_weight", m.interctc_weight.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.nar_epochs", t.nar_epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.mode", mode_name(t.mode).to_string()),
            ("train.random_block", on_off(t.random_block).to_string()),
            ("train.random_block_min", t.random_block_min.to_string()),
            ("train.random_block_max", t.random_block_max.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.nar_lr", t.nar_lr.to_string()),
            ("lm.pretrain", on_off(self.lm.pretrain).to_string()),
            (
                "lm.external_multiplier",
                self.lm.external_multiplier.to_string(),
            ),
            ("lm.epochs", self.lm.epochs.to_string()),
            ("lm.lr", self.lm.lr.to_string()),
            ("lm.freeze", on_off(self.lm.freeze).to_string()),
            ("decode.decoders", decoders.join(",")),
            ("decode.baseline", self.decode.baseline.clone()),
            ("cost.mode", cost_mode.to_string()),
            ("cost.c", cost_c.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Short hex digest of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn parse_value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got {v:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
        let other = RunConfig::parse("train.seed=8\n").unwrap();
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# toy run\n\nmodel.d_m=16  # smaller\nlm.pretrain=off\ncost.mode=wall-clock\n\
             decode.decoders=align,full\ntrain.mode=ce\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d_m, 16);
        assert!(!cfg.lm.pretrain);
        assert_eq!(cfg.cost, CostModel::WallClock);
        assert_eq!(
            cfg.decode.decoders,
            vec![DecoderKind::Alignment, DecoderKind::Full]
        );
        assert_eq!(cfg.train.mode, LossMode::Ce);
        let c = RunConfig::parse("cost.c=0.5").unwrap();
        assert_eq!(c.cost, CostModel::Synthetic { c: 0.5 });
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("model.d_m=16\n\nmodel.width=3\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::parse("train.epochs=many").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }), "{e}");
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("cost.mode=fast").is_err());
        assert!(RunConfig::parse("block.l_block=20").is_err());
        assert!(RunConfig::parse("train.mode=ctc").is_err());
    }

    #[test]
    fn derived_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.spec(), BlockSpec::DEFAULT);
        assert_eq!(cfg.model_config(true).vocab, 21);
        assert!(!cfg.model_config(false).label_context);
        assert_eq!(cfg.ce_train_config().random_block, Some((35, 45)));
        assert_eq!(cfg.ctc_train_config().mode, LossMode::Ctc);
        let s = cfg.clone().with_seed(3);
        assert_eq!((s.corpus.seed, s.train.seed), (3, 3));
    }
}

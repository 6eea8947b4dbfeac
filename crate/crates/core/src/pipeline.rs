//! The experimental flow: data, alignment model, forced alignment, LM
//! pretraining, CE training, decoding, scoring and the report.
//!
//! Each step exists as an in-memory function and as an on-disk stage that
//! reads its predecessors' artifacts under an output directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::ctc::ctc_forced_align;
use crate::decode::{decode, DecoderKind, EmissionLog, EMISSION_CSV_HEADER};
use crate::error::{Error, Result};
use crate::eval::{
    matched_pair_test, mean_latency, render_table, wer_report, write_report_csv, LatencyEvent,
    ReportRow, UttResult, WerReport,
};
use crate::grad::ParamStore;
use crate::labels::{
    read_alignments, read_transcripts, write_alignments, write_transcripts, EditCounts,
    FrameAlignment, Transcript, Vocab,
};
use crate::model::{train_epoch, LanguageModel, SarModel, TrainItem};
use crate::synth::{gen_corpus, gen_external_text, read_dataset, write_dataset, Corpus, Utterance};

pub const THREADS_ENV: &str = "SARSTREAM_THREADS";

/// Streaming NAR model trained with CTC; source of forced alignments.
pub const NAR_CTC: &str = "nar-ctc";
/// Streaming NAR model trained with CE on forced alignments.
pub const NAR_CE: &str = "nar-ce";
pub const SAR: &str = "sar";
pub const SYSTEMS: [&str; 3] = [NAR_CTC, NAR_CE, SAR];

/// Worker pool size from `SARSTREAM_THREADS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to `threads` workers, keeping input order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn derived_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

pub fn external_text(cfg: &RunConfig) -> Result<Vec<Transcript>> {
    if cfg.lm.external_multiplier == 0 {
        return Ok(Vec::new());
    }
    gen_external_text(&cfg.corpus, cfg.lm.external_multiplier)
}

fn train_model(
    model: &mut SarModel,
    items: &[TrainItem<'_>],
    tc: &crate::model::TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| train_epoch(model, items, tc, &mut rng))
        .collect()
}

/// CTC-trained streaming NAR model.
pub fn train_alignment_model(cfg: &RunConfig, train: &[Utterance]) -> Result<SarModel> {
    let seed = derived_seed(cfg.train.seed, 1);
    let mut model = SarModel::new(cfg.model_config(false), seed)?;
    let items: Vec<TrainItem<'_>> = train
        .iter()
        .map(|u| TrainItem {
            features: &u.features,
            transcript: &u.transcript,
            alignment: None,
        })
        .collect();
    train_model(
        &mut model,
        &items,
        &cfg.ctc_train_config(),
        cfg.train.nar_epochs,
        seed,
    )?;
    Ok(model)
}

/// Viterbi alignments of each transcript under the model's posteriors.
pub fn force_align(
    model: &SarModel,
    utts: &[Utterance],
    cfg: &RunConfig,
    threads: usize,
) -> Result<Vec<FrameAlignment>> {
    let spec = cfg.spec();
    par_map(utts, threads, |u| {
        let post = model.forward_nar(&u.features, &spec)?;
        ctc_forced_align(&post, &u.transcript)
    })
}

/// Fraction of frames where two alignment sets agree.
pub fn frame_agreement(a: &[FrameAlignment], b: &[FrameAlignment]) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        total += x.len();
        same += x
            .labels
            .iter()
            .zip(&y.labels)
            .filter(|(p, q)| p == q)
            .count();
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}

/// LM pretrained on the training transcripts plus any external text.
pub fn pretrain_lm(
    cfg: &RunConfig,
    train_text: &[Transcript],
    external: &[Transcript],
) -> Result<LanguageModel> {
    let m = &cfg.model;
    let mut lm = LanguageModel::new(
        cfg.corpus.vocab_size + 1,
        m.d_lm,
        m.d_ctx,
        derived_seed(cfg.train.seed, 2),
    )?;
    let corpus: Vec<Transcript> = train_text.iter().chain(external).cloned().collect();
    lm.pretrain(&corpus, &cfg.lm_train_config())?;
    Ok(lm)
}

/// CE-trained SAR (`label_context`) or NAR system on the given alignments.
pub fn train_ce_system(
    cfg: &RunConfig,
    label_context: bool,
    train: &[Utterance],
    alignments: &[FrameAlignment],
    lm: Option<&LanguageModel>,
) -> Result<SarModel> {
    if alignments.len() != train.len() {
        return Err(Error::input(format!(
            "{} alignments for {} training utterances",
            alignments.len(),
            train.len()
        )));
    }
    let seed = derived_seed(cfg.train.seed, if label_context { 3 } else { 4 });
    let mut model = SarModel::new(cfg.model_config(label_context), seed)?;
    if let (true, Some(lm)) = (label_context, lm) {
        model.load_lm(lm)?;
        model.freeze_lm(cfg.lm.freeze);
    }
    let items: Vec<TrainItem<'_>> = train
        .iter()
        .zip(alignments)
        .map(|(u, a)| TrainItem {
            features: &u.features,
            transcript: &u.transcript,
            alignment: Some(a),
        })
        .collect();
    train_model(
        &mut model,
        &items,
        &cfg.ce_train_config(),
        cfg.train.epochs,
        seed,
    )?;
    Ok(model)
}

pub fn decode_corpus(
    model: &SarModel,
    kind: DecoderKind,
    utts: &[Utterance],
    cfg: &RunConfig,
    threads: usize,
) -> Result<Vec<(Transcript, EmissionLog)>> {
    let spec = cfg.spec();
    par_map(utts, threads, |u| {
        decode(kind, model, &u.features, &spec, cfg.cost)
    })
}

/// WER and latency of one (system, decoder) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemEval {
    pub system: String,
    pub decoder: String,
    pub wer: WerReport,
    pub mean_latency_s: f64,
}

pub fn score(
    system: &str,
    decoder: DecoderKind,
    refs: &[Transcript],
    outputs: &[(Transcript, EmissionLog)],
) -> Result<SystemEval> {
    let hyps: Vec<Transcript> = outputs.iter().map(|(t, _)| t.clone()).collect();
    let events: Vec<LatencyEvent> = outputs.iter().map(|(_, l)| l.latency_event()).collect();
    Ok(SystemEval {
        system: system.to_string(),
        decoder: decoder.name().to_string(),
        wer: wer_report(refs, &hyps)?,
        mean_latency_s: mean_latency(&events)?,
    })
}

/// Report rows with sign-test p-values against `baseline` (`system:decoder`).
pub fn report_rows(
    evals: &[SystemEval],
    baseline: &str,
    config_hash: &str,
) -> Result<Vec<ReportRow>> {
    let base = evals
        .iter()
        .find(|e| format!("{}:{}", e.system, e.decoder) == baseline)
        .ok_or_else(|| {
            Error::input(format!(
                "baseline {baseline} is not among the evaluated systems"
            ))
        })?;
    evals
        .iter()
        .map(|e| {
            let is_base = std::ptr::eq(e, base);
            Ok(ReportRow {
                system: e.system.clone(),
                decoder: e.decoder.clone(),
                wer: e.wer.wer(),
                mean_latency_s: e.mean_latency_s,
                p_vs_baseline: if is_base {
                    None
                } else {
                    Some(matched_pair_test(&base.wer, &e.wer)?.sign_p)
                },
                config_hash: config_hash.to_string(),
            })
        })
        .collect()
}

/// Everything one in-memory run produces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub evals: Vec<SystemEval>,
    pub rows: Vec<ReportRow>,
    /// Forced-alignment frame agreement with the gold alignments.
    pub alignment_agreement: f64,
    /// Test-set perplexity of the pretrained LM.
    pub lm_test_perplexity: Option<f64>,
}

impl Experiment {
    pub fn eval(&self, system: &str, decoder: DecoderKind) -> Option<&SystemEval> {
        self.evals
            .iter()
            .find(|e| e.system == system && e.decoder == decoder.name())
    }
}

/// Runs the whole flow without touching the disk.
pub fn run_in_memory(cfg: &RunConfig, threads: usize) -> Result<Experiment> {
    let corpus = gen_corpus(&cfg.corpus)?;
    let nar = train_alignment_model(cfg, &corpus.train)?;
    let forced = force_align(&nar, &corpus.train, cfg, threads)?;
    let gold: Vec<FrameAlignment> = corpus.train.iter().map(|u| u.alignment.clone()).collect();
    let train_text: Vec<Transcript> = corpus.train.iter().map(|u| u.transcript.clone()).collect();
    let test_text: Vec<Transcript> = corpus.test.iter().map(|u| u.transcript.clone()).collect();
    let lm = if cfg.lm.pretrain {
        Some(pretrain_lm(cfg, &train_text, &external_text(cfg)?)?)
    } else {
        None
    };
    let lm_test_perplexity = lm.as_ref().map(|l| l.perplexity(&test_text)).transpose()?;
    let nar_ce = train_ce_system(cfg, false, &corpus.train, &forced, None)?;
    let sar = train_ce_system(cfg, true, &corpus.train, &forced, lm.as_ref())?;
    let mut evals = Vec::new();
    for (name, model) in [(NAR_CTC, &nar), (NAR_CE, &nar_ce), (SAR, &sar)] {
        for &kind in &cfg.decode.decoders {
            let out = decode_corpus(model, kind, &corpus.test, cfg, threads)?;
            evals.push(score(name, kind, &test_text, &out)?);
        }
    }
    let rows = report_rows(&evals, &cfg.decode.baseline, &cfg.hash())?;
    Ok(Experiment {
        evals,
        rows,
        alignment_agreement: frame_agreement(&forced, &gold),
        lm_test_perplexity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainNar,
    Align,
    PretrainLm,
    TrainSar,
    Decode,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainNar,
        Stage::Align,
        Stage::PretrainLm,
        Stage::TrainSar,
        Stage::Decode,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainNar => "train-nar",
            Stage::Align => "align",
            Stage::PretrainLm => "pretrain-lm",
            Stage::TrainSar => "train-sar",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

/// Artifact paths under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run.conf")
    }

    pub fn dataset(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    pub fn external_text(&self) -> PathBuf {
        self.root.join("data").join("external.text")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.ckpt"))
    }

    pub fn forced_alignments(&self) -> PathBuf {
        self.root.join("align").join("train.align")
    }

    pub fn decode_file(&self, system: &str, decoder: &str, ext: &str) -> PathBuf {
        self.root
            .join("decode")
            .join(format!("{system}.{decoder}.{ext}"))
    }

    pub fn eval_file(&self, system: &str, decoder: &str) -> PathBuf {
        self.root
            .join("eval")
            .join(format!("{system}.{decoder}.utt"))
    }

    pub fn eval_summary(&self) -> PathBuf {
        self.root.join("eval").join("summary.csv")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn require(path: &Path, kind: &'static str, stage: Stage, layout: &Layout) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    let artifact = path
        .strip_prefix(&layout.root)
        .unwrap_or(path)
        .display()
        .to_string();
    Err(Error::MissingArtifact {
        kind,
        artifact,
        stage: stage.name().to_string(),
    })
}

fn load_split(layout: &Layout, cfg: &RunConfig, split: &str) -> Result<Vec<Utterance>> {
    let dir = layout.dataset(split);
    require(&dir.join("text"), "dataset", Stage::GenData, layout)?;
    read_dataset(&dir, &cfg.corpus.vocab(), cfg.corpus.frame_duration)
}

fn load_model(layout: &Layout, cfg: &RunConfig, name: &str, stage: Stage) -> Result<SarModel> {
    let path = layout.checkpoint(name);
    require(&path, "checkpoint", stage, layout)?;
    SarModel::from_params(cfg.model_config(name == SAR), &ParamStore::load(&path)?)
}

fn write_text_file(path: &Path, vocab: &Vocab, items: &[Transcript]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_transcripts(&mut w, vocab, items)?;
    w.flush()?;
    Ok(())
}

fn read_text_file(path: &Path, vocab: &Vocab) -> Result<Vec<Transcript>> {
    read_transcripts(BufReader::new(fs::File::open(path)?), vocab, path)
}

/// Runs one stage; returns a short human-readable summary.
pub fn run_stage(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<String> {
    let layout = Layout::new(out);
    let threads = worker_count();
    let vocab = cfg.corpus.vocab();
    match stage {
        Stage::GenData => {
            let Corpus { train, test, .. } = gen_corpus(&cfg.corpus)?;
            fs::create_dir_all(out)?;
            fs::write(layout.config(), cfg.to_text())?;
            write_dataset(&layout.dataset("train"), &vocab, &train)?;
            write_dataset(&layout.dataset("test"), &vocab, &test)?;
            let ext = external_text(cfg)?;
            write_text_file(&layout.external_text(), &vocab, &ext)?;
            Ok(format!(
                "{} train, {} test utterances, {} external transcripts",
                train.len(),
                test.len(),
                ext.len()
            ))
        }
        Stage::TrainNar => {
            let train = load_split(&layout, cfg, "train")?;
            let model = train_alignment_model(cfg, &train)?;
            model.params.save(&layout.checkpoint(NAR_CTC))?;
            Ok(format!("wrote {NAR_CTC}.ckpt"))
        }
        Stage::Align => {
            let train = load_split(&layout, cfg, "train")?;
            let model = load_model(&layout, cfg, NAR_CTC, Stage::TrainNar)?;
            let forced = force_align(&model, &train, cfg, threads)?;
            let path = layout.forced_alignments();
            fs::create_dir_all(path.parent().expect("align dir"))?;
            let mut w = BufWriter::new(fs::File::create(&path)?);
            write_alignments(&mut w, &forced)?;
            w.flush()?;
            let gold: Vec<FrameAlignment> = train.into_iter().map(|u| u.alignment).collect();
            Ok(format!(
                "forced alignments agree with gold on {:.2}% of frames",
                100.0 * frame_agreement(&forced, &gold)
            ))
        }
        Stage::PretrainLm => {
            if !cfg.lm.pretrain {
                return Ok("lm.pretrain=off, skipped".to_string());
            }
            let train = load_split(&layout, cfg, "train")?;
            let test = load_split(&layout, cfg, "test")?;
            require(
                &layout.external_text(),
                "external text",
                Stage::GenData,
                &layout,
            )?;
            let ext = read_text_file(&layout.external_text(), &vocab)?;
            let text: Vec<Transcript> = train.into_iter().map(|u| u.transcript).collect();
            let lm = pretrain_lm(cfg, &text, &ext)?;
            lm.params.save(&layout.checkpoint("lm"))?;
            let test_text: Vec<Transcript> = test.into_iter().map(|u| u.transcript).collect();
            Ok(format!("test perplexity {:.4}", lm.perplexity(&test_text)?))
        }
        Stage::TrainSar => {
            let train = load_split(&layout, cfg, "train")?;
            let path = layout.forced_alignments();
            require(&path, "alignments", Stage::Align, &layout)?;
            let forced = read_alignments(BufReader::new(fs::File::open(&path)?), &vocab, &path)?;
            let lm = if cfg.lm.pretrain {
                let p = layout.checkpoint("lm");
                require(&p, "checkpoint", Stage::PretrainLm, &layout)?;
                let m = &cfg.model;
                Some(LanguageModel::from_params(
                    cfg.corpus.vocab_size + 1,
                    m.d_lm,
                    m.d_ctx,
                    &ParamStore::load(&p)?,
                )?)
            } else {
                None
            };
            let sar = train_ce_system(cfg, true, &train, &forced, lm.as_ref())?;
            sar.params.save(&layout.checkpoint(SAR))?;
            let nar = train_ce_system(cfg, false, &train, &forced, None)?;
            nar.params.save(&layout.checkpoint(NAR_CE))?;
            Ok(format!("wrote {SAR}.ckpt and {NAR_CE}.ckpt"))
        }
        Stage::Decode => {
            let models = [
                (SAR, load_model(&layout, cfg, SAR, Stage::TrainSar)?),
                (NAR_CE, load_model(&layout, cfg, NAR_CE, Stage::TrainSar)?),
                (NAR_CTC, load_model(&layout, cfg, NAR_CTC, Stage::TrainNar)?),
            ];
            let test = load_split(&layout, cfg, "test")?;
            fs::create_dir_all(layout.root.join("decode"))?;
            let mut n = 0;
            for name in SYSTEMS {
                let model = &models.iter().find(|m| m.0 == name).expect("system").1;
                for &kind in &cfg.decode.decoders {
                    let outputs = decode_corpus(model, kind, &test, cfg, threads)?;
                    write_decode_outputs(&layout, name, kind, &vocab, &outputs)?;
                    n += 1;
                }
            }
            Ok(format!(
                "decoded {} utterances with {n} system/decoder pairs",
                test.len()
            ))
        }
        Stage::Eval => {
            let test = load_split(&layout, cfg, "test")?;
            let refs: Vec<Transcript> = test.into_iter().map(|u| u.transcript).collect();
            fs::create_dir_all(layout.root.join("eval"))?;
            let mut summary = String::from("system,decoder,wer,mean_latency_s\n");
            for name in SYSTEMS {
                for &kind in &cfg.decode.decoders {
                    let e = load_decode_eval(&layout, name, kind, &vocab, &refs)?;
                    write_utt_results(&layout.eval_file(name, kind.name()), &e.wer.utts)?;
                    summary.push_str(&format!(
                        "{},{},{},{}\n",
                        e.system,
                        e.decoder,
                        e.wer.wer(),
                        e.mean_latency_s
                    ));
                }
            }
            fs::write(layout.eval_summary(), summary)?;
            Ok(format!("wrote {}", layout.eval_summary().display()))
        }
        Stage::Report => {
            let rows = report_from_disk(&layout, cfg)?;
            let mut csv = Vec::new();
            write_report_csv(&mut csv, &rows)?;
            fs::write(layout.report_csv(), &csv)?;
            let text = format!(
                "config hash {}\n\n{}\nconfig:\n{}",
                cfg.hash(),
                render_table(&rows),
                cfg.to_text()
            );
            fs::write(layout.report_text(), &text)?;
            Ok(text)
        }
    }
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<()> {
    for stage in Stage::ALL {
        run_stage(stage, cfg, out)?;
    }
    Ok(())
}

fn write_decode_outputs(
    layout: &Layout,
    system: &str,
    kind: DecoderKind,
    vocab: &Vocab,
    outputs: &[(Transcript, EmissionLog)],
) -> Result<()> {
    let hyps: Vec<Transcript> = outputs.iter().map(|(t, _)| t.clone()).collect();
    write_text_file(
        &layout.decode_file(system, kind.name(), "hyp"),
        vocab,
        &hyps,
    )?;
    let mut emit = BufWriter::new(fs::File::create(layout.decode_file(
        system,
        kind.name(),
        "emit.csv",
    ))?);
    writeln!(emit, "{EMISSION_CSV_HEADER}")?;
    let mut lat = BufWriter::new(fs::File::create(layout.decode_file(
        system,
        kind.name(),
        "lat.csv",
    ))?);
    writeln!(lat, "utt_id,duration_s,last_emit_s")?;
    for (_, log) in outputs {
        log.write_csv(&mut emit, vocab)?;
        let e = log.latency_event();
        writeln!(lat, "{},{},{}", e.utt_id, e.duration_s, e.last_emit_s)?;
    }
    emit.flush()?;
    lat.flush()?;
    Ok(())
}

fn format_error(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Comma-separated rows after a header line, with their byte offsets.
fn read_csv_rows(path: &Path, columns: usize) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        let start = offset;
        offset += line.len() as u64 + 1;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != columns {
            return Err(format_error(
                path,
                start,
                format!("expected {columns} fields"),
            ));
        }
        rows.push((start, fields));
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, offset: u64, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| format_error(path, offset, format!("bad number {v:?}")))
}

fn load_decode_eval(
    layout: &Layout,
    system: &str,
    kind: DecoderKind,
    vocab: &Vocab,
    refs: &[Transcript],
) -> Result<SystemEval> {
    let hyp_path = layout.decode_file(system, kind.name(), "hyp");
    require(&hyp_path, "decode output", Stage::Decode, layout)?;
    let hyps = read_text_file(&hyp_path, vocab)?;
    let lat_path = layout.decode_file(system, kind.name(), "lat.csv");
    require(&lat_path, "decode output", Stage::Decode, layout)?;
    let events = read_csv_rows(&lat_path, 3)?
        .into_iter()
        .map(|(off, f)| {
            Ok(LatencyEvent {
                utt_id: f[0].clone(),
                duration_s: parse_field(&lat_path, off, &f[1])?,
                last_emit_s: parse_field(&lat_path, off, &f[2])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SystemEval {
        system: system.to_string(),
        decoder: kind.name().to_string(),
        wer: wer_report(refs, &hyps)?,
        mean_latency_s: mean_latency(&events)?,
    })
}

fn write_utt_results(path: &Path, utts: &[UttResult]) -> Result<()> {
    let mut s = String::from("utt_id,ref_len,sub,del,ins\n");
    for u in utts {
        let c = u.counts;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            u.utt_id, u.ref_len, c.substitutions, c.deletions, c.insertions
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_utt_results(path: &Path) -> Result<WerReport> {
    let mut utts = Vec::new();
    let mut total = EditCounts::default();
    let mut ref_words = 0;
    for (off, f) in read_csv_rows(path, 5)? {
        let counts = EditCounts {
            substitutions: parse_field(path, off, &f[2])?,
            deletions: parse_field(path, off, &f[3])?,
            insertions: parse_field(path, off, &f[4])?,
        };
        let ref_len: usize = parse_field(path, off, &f[1])?;
        total += counts;
        ref_words += ref_len;
        utts.push(UttResult {
            utt_id: f[0].clone(),
            ref_len,
            counts,
        });
    }
    Ok(WerReport {
        utts,
        total,
        ref_words,
    })
}

fn report_from_disk(layout: &Layout, cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let summary = layout.eval_summary();
    require(&summary, "evaluation", Stage::Eval, layout)?;
    let mut evals = Vec::new();
    for (off, f) in read_csv_rows(&summary, 4)? {
        let path = layout.eval_file(&f[0], &f[1]);
        require(&path, "evaluation", Stage::Eval, layout)?;
        evals.push(SystemEval {
            system: f[0].clone(),
            decoder: f[1].clone(),
            wer: read_utt_results(&path)?,
            mean_latency_s: parse_field(&summary, off, &f[3])?,
        });
    }
    report_rows(&evals, &cfg.decode.baseline, &cfg.hash())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "corpus.train_size=6\ncorpus.test_size=3\ncorpus.len_min=30\ncorpus.len_max=60\n\
             model.d_m=8\nmodel.d_ctx=8\nmodel.d_lm=8\nmodel.d_ff=8\n\
             train.epochs=1\ntrain.nar_epochs=1\nlm.epochs=1\nlm.external_multiplier=1\n",
        )
        .unwrap()
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            let out = par_map(&items, threads, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        let err = par_map(&items, 3, |&x| {
            if x == 20 {
                Err(Error::input("boom"))
            } else {
                Ok(x)
            }
        });
        assert!(err.is_err());
        assert!(par_map(&[] as &[usize], 4, |&x| Ok(x)).unwrap().is_empty());
    }

    #[test]
    fn decode_before_training_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_stage(Stage::GenData, &cfg, dir.path()).unwrap();
        let e = run_stage(Stage::Decode, &cfg, dir.path()).unwrap_err();
        assert_eq!(
            e.to_string(),
            "missing checkpoint: sar.ckpt (run train-sar)"
        );
        assert_eq!(e.exit_code(), 3);
        let e = run_stage(Stage::TrainSar, &cfg, dir.path()).unwrap_err();
        assert_eq!(
            e.to_string(),
            "missing alignments: align/train.align (run align)"
        );
        let empty = tempfile::tempdir().unwrap();
        let e = run_stage(Stage::TrainNar, &cfg, empty.path()).unwrap_err();
        assert_eq!(
            e.to_string(),
            "missing dataset: data/train/text (run gen-data)"
        );
    }

    #[test]
    fn disk_and_memory_runs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_all(&cfg, dir.path()).unwrap();
        let mem = run_in_memory(&cfg, 2).unwrap();
        let mut csv = Vec::new();
        write_report_csv(&mut csv, &mem.rows).unwrap();
        assert_eq!(fs::read(dir.path().join("report.csv")).unwrap(), csv);
        assert_eq!(mem.rows.len(), 12);
        assert!(mem.rows.iter().all(|r| r.config_hash == cfg.hash()));
        assert_eq!(
            mem.rows
                .iter()
                .filter(|r| r.p_vs_baseline.is_none())
                .count(),
            1
        );
        let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains(&cfg.hash()));
        assert!(text.contains("corpus.train_size=6"));
    }

    #[test]
    fn unknown_baseline_is_an_error() {
        let cfg = RunConfig {
            decode: crate::config::DecodeSettings {
                decoders: vec![DecoderKind::Full],
                baseline: "nar-ce:overlap".into(),
            },
            ..tiny()
        };
        assert!(run_in_memory(&cfg, 1).is_err());
    }
}

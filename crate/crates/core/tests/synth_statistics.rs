//! Statistical checks of the synthetic corpus against its generating
//! parameters, computed independently of the library's own summaries.

use sarstream::blocking::{make_blocks, BlockSpec};
use sarstream::labels::token_runs;
use sarstream::synth::{bigram_source, gen_corpus, gen_external_text, CorpusConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn external_text_follows_the_bigram_source() {
    let cfg = CorpusConfig::default();
    let source = bigram_source(&cfg);
    let text = gen_external_text(&cfg, 10).unwrap();
    assert_eq!(text.len(), 10 * cfg.train_size);
    let v = cfg.vocab_size + 1;

    // row 0 is the sentence start
    let mut counts = vec![vec![0u64; v]; v];
    for y in &text {
        let mut prev = 0usize;
        for &t in &y.tokens {
            counts[prev][t] += 1;
            prev = t;
        }
    }
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (ctx, row) in counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n < 200 {
            continue;
        }
        // pool cells with small expectation into one bin
        let (mut pooled_obs, mut pooled_exp, mut cells) = (0.0, 0.0, 0usize);
        for (t, &obs) in row.iter().enumerate().skip(1) {
            let expected = n as f64 * source.rows[ctx][t - 1];
            if expected < 5.0 {
                pooled_obs += obs as f64;
                pooled_exp += expected;
            } else {
                stat += (obs as f64 - expected).powi(2) / expected;
                cells += 1;
            }
        }
        if pooled_exp > 0.0 {
            stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp.max(1e-9);
            cells += 1;
        }
        dof += cells - 1;
    }
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi2 {stat:.1} on {dof} dof, p = {p:e}");
}

#[test]
fn durations_and_straddling_match_the_config() {
    let cfg = CorpusConfig::default();
    let corpus = gen_corpus(&cfg).unwrap();
    let spec = BlockSpec::DEFAULT;
    let (mut tokens, mut straddling) = (0usize, 0usize);
    for u in &corpus.train {
        let t = u.features.frames();
        assert!(
            (cfg.len_min..=cfg.len_max).contains(&t),
            "{} has {t} frames",
            u.utt_id()
        );
        let mut edges = Vec::new();
        for b in make_blocks(t, &spec).unwrap() {
            edges.extend([b.frames.start, b.frames.end, b.window.start, b.window.end]);
        }
        for (_, s, e) in token_runs(&u.alignment.labels) {
            assert!((cfg.dur_min..=cfg.dur_max).contains(&(e - s)) || e == t);
            tokens += 1;
            if edges.iter().any(|&x| s < x && x < e) {
                straddling += 1;
            }
        }
    }
    let rate = straddling as f64 / tokens as f64;
    assert!(rate >= 0.30, "straddle rate {rate:.3}");
}

//! Causal LM pretraining with and without external text.

use sarstream::model::{LanguageModel, LmTrainConfig};
use sarstream::synth::{bigram_source, gen_corpus, gen_external_text, CorpusConfig};

fn main() -> sarstream::Result<()> {
    let cfg = CorpusConfig {
        seed: 3,
        ..CorpusConfig::default()
    };
    let corpus = gen_corpus(&cfg)?;
    let train: Vec<_> = corpus.train.iter().map(|u| u.transcript.clone()).collect();
    let test: Vec<_> = corpus.test.iter().map(|u| u.transcript.clone()).collect();
    println!(
        "bigram source perplexity floor ~ {:.3}",
        bigram_source(&cfg).entropy_rate().exp()
    );
    for multiplier in [0, 1, 10] {
        let mut text = train.clone();
        if multiplier > 0 {
            text.extend(gen_external_text(&cfg, multiplier)?);
        }
        let mut lm = LanguageModel::new(corpus.vocab.len(), 32, 32, 1)?;
        let history = lm.pretrain(&text, &LmTrainConfig::default())?;
        println!(
            "multiplier {multiplier:>2}: {:>5} transcripts, train ppl {:.3} -> {:.3}, test ppl {:.3}",
            text.len(),
            history[0],
            history[history.len() - 1],
            lm.perplexity(&test)?
        );
    }
    Ok(())
}

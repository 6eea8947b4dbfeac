//! Generates a corpus, measures how often tokens cross block edges and
//! writes it in the on-disk layout.

use sarstream::blocking::BlockSpec;
use sarstream::synth::{gen_corpus, read_dataset, straddle_rate, write_dataset, CorpusConfig};

fn main() -> sarstream::Result<()> {
    let cfg = CorpusConfig::default();
    let corpus = gen_corpus(&cfg)?;
    let u = &corpus.test[0];
    let text: Vec<&str> = u
        .transcript
        .tokens
        .iter()
        .map(|&t| corpus.vocab.symbol(t).unwrap())
        .collect();
    println!(
        "{}: {} frames, {}",
        u.utt_id(),
        u.features.frames(),
        text.join(" ")
    );
    println!(
        "straddle rate under {}: {:.1}%",
        BlockSpec::DEFAULT,
        100.0 * straddle_rate(&corpus.train, &BlockSpec::DEFAULT)?
    );

    let dir = std::env::temp_dir().join("sarstream-synth-example");
    write_dataset(&dir, &corpus.vocab, &corpus.test)?;
    let back = read_dataset(&dir, &corpus.vocab, cfg.frame_duration)?;
    println!(
        "wrote {} utterances to {}; round trip equal: {}",
        back.len(),
        dir.display(),
        back == corpus.test
    );
    Ok(())
}

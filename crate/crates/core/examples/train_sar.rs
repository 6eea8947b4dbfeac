//! Trains a small SAR model on gold alignments and decodes the test set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarstream::blocking::BlockSpec;
use sarstream::decode::{decode, DecoderKind};
use sarstream::eval::{wer_report, CostModel};
use sarstream::model::{train_epoch, LossMode, ModelConfig, SarModel, TrainConfig, TrainItem};
use sarstream::synth::{gen_corpus, CorpusConfig};

fn main() -> sarstream::Result<()> {
    let cfg = CorpusConfig {
        train_size: 60,
        test_size: 20,
        ..CorpusConfig::default()
    };
    let corpus = gen_corpus(&cfg)?;
    let mut model = SarModel::new(ModelConfig::toy(corpus.vocab.len(), cfg.feat_dim), 1)?;
    let items: Vec<TrainItem> = corpus
        .train
        .iter()
        .map(|u| TrainItem {
            features: &u.features,
            transcript: &u.transcript,
            alignment: Some(&u.alignment),
        })
        .collect();
    let tc = TrainConfig {
        mode: LossMode::CeInterCtc,
        random_block: Some((35, 45)),
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for epoch in 1..=4 {
        println!(
            "epoch {epoch}: loss {:.4}",
            train_epoch(&mut model, &items, &tc, &mut rng)?
        );
    }

    let refs: Vec<_> = corpus.test.iter().map(|u| u.transcript.clone()).collect();
    for kind in DecoderKind::ALL {
        let hyps = corpus
            .test
            .iter()
            .map(|u| {
                decode(
                    kind,
                    &model,
                    &u.features,
                    &BlockSpec::DEFAULT,
                    CostModel::WallClock,
                )
                .map(|(y, _)| y)
            })
            .collect::<sarstream::Result<Vec<_>>>()?;
        println!("{:<8} {}", kind.name(), wer_report(&refs, &hyps)?);
    }
    Ok(())
}

//! The whole experimental flow in memory on a reduced corpus.

use sarstream::config::RunConfig;
use sarstream::eval::render_table;
use sarstream::pipeline::{run_in_memory, worker_count};

fn main() -> sarstream::Result<()> {
    let cfg = RunConfig::parse(
        "corpus.train_size=80\n\
         corpus.test_size=20\n\
         corpus.noise=0.6\n\
         train.epochs=2\n\
         train.nar_epochs=2\n\
         lm.external_multiplier=5\n",
    )?;
    let exp = run_in_memory(&cfg, worker_count())?;
    println!(
        "forced alignment frame agreement {:.2}%",
        100.0 * exp.alignment_agreement
    );
    if let Some(ppl) = exp.lm_test_perplexity {
        println!("LM test perplexity {ppl:.3}");
    }
    print!("{}", render_table(&exp.rows));
    Ok(())
}

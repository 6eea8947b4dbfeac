//! Streaming versus whole-utterance latency under a quadratic cost model.

use sarstream::blocking::{make_blocks, BlockSpec};
use sarstream::eval::{block_schedule, CostModel};

fn main() -> sarstream::Result<()> {
    let spec = BlockSpec::DEFAULT;
    let fd = 0.04;
    let c = 2e-5;
    let cost = CostModel::synthetic(c)?;
    let t = 250; // 10 s of frames
    let done = block_schedule(t, &spec, cost, fd)?;
    for (b, end) in make_blocks(t, &spec)?.iter().zip(&done) {
        println!(
            "block {:>2}: available {:.2}s, done {:.4}s",
            b.index,
            b.frames.end as f64 * fd,
            end
        );
    }
    let speech = t as f64 * fd;
    let streaming = done.last().unwrap() - speech;
    let full = c * (t * t) as f64;
    println!("latency after end of speech: blockwise {streaming:.4}s, full utterance {full:.4}s");
    Ok(())
}

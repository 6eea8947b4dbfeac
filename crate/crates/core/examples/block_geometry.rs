//! Overlapping blocks, their central windows and random block sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarstream::blocking::{make_blocks, sample_block_size, BlockSpec};

fn main() -> sarstream::Result<()> {
    let spec = BlockSpec::DEFAULT;
    println!("spec (l_block,l_hop,n_l,n_r) = {spec}");
    for t in [40, 56, 130] {
        println!("T = {t}");
        for b in make_blocks(t, &spec)? {
            // printed 1-based and inclusive
            println!(
                "  block {:>2}: frames {:>3}..={:<3} predicts {:>3}..={:<3}",
                b.index,
                b.frames.start + 1,
                b.frames.end,
                b.window.start + 1,
                b.window.end
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sizes: Vec<String> = (0..8)
        .map(|_| sample_block_size(&mut rng, 35, 45, &spec).map(|s| s.to_string()))
        .collect::<sarstream::Result<_>>()?;
    println!("random block specs: {}", sizes.join(" "));
    Ok(())
}

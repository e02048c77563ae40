//! Splits the keys into blocks, attends to each block separately and merges
//! the partial results with their log-sum-exp. The merge is exact in any
//! order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ring2d::oracle::block_attention;
use ring2d::{block_update, full_attention, BlockResult, DenseTensor};

fn main() -> ring2d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (heads, seq, dim) = (4, 24, 8);
    let q = DenseTensor::<f64>::random(heads, seq, dim, &mut rng);
    let k = DenseTensor::<f64>::random(heads, seq, dim, &mut rng);
    let v = DenseTensor::<f64>::random(heads, seq, dim, &mut rng);

    for causal in [false, true] {
        let (reference, _) = full_attention(&q, &k, &v, causal)?;
        let mut blocks = Vec::new();
        for lo in (0..seq).step_by(6) {
            let idx: Vec<usize> = (lo..lo + 6).collect();
            blocks.push(block_attention(
                &q,
                &k.select_tokens(&idx)?,
                &v.select_tokens(&idx)?,
                causal,
            )?);
        }
        blocks.shuffle(&mut rng);

        let mut acc = BlockResult::empty(heads, dim, q.positions().to_vec());
        for b in &blocks {
            acc = block_update(&acc, b)?;
        }
        println!(
            "causal={causal:<5} 4 blocks merged in shuffled order: max |diff| = {:.2e}",
            acc.out.max_abs_diff(&reference)?
        );
    }
    Ok(())
}

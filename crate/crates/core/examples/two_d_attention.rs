//! Full 2D pipeline on a GQA model: KV replication, sequence-to-head
//! all-to-all, double ring per CP group, head-to-sequence all-to-all. Every
//! grid gives the dense result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ring2d::{
    build_rank_grid, full_attention, run_2d_attention, ClusterConfig, DenseTensor, ModelConfig,
    ParallelConfig, Placement,
};

fn main() -> ring2d::Result<()> {
    let (heads, kv_heads, seq, dim) = (8, 2, 64, 16);
    let model = ModelConfig::gqa(seq, heads, kv_heads, heads * dim);
    let cluster = ClusterConfig {
        gpus_per_node: 4,
        ..ClusterConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = DenseTensor::<f64>::random(heads, seq, dim, &mut rng);
    let k = DenseTensor::<f64>::random(kv_heads, seq, dim, &mut rng);
    let v = DenseTensor::<f64>::random(kv_heads, seq, dim, &mut rng);
    let (reference, _) = full_attention(&q, &k, &v, true)?;

    for (d_hp, d_cp, w) in [
        (1, 8, 8),
        (1, 8, 2),
        (2, 4, 2),
        (4, 2, 1),
        (8, 1, 1),
        (8, 4, 2),
    ] {
        for placement in Placement::ALL {
            let par = ParallelConfig::new(d_hp, d_cp, w, placement);
            let grid = build_rank_grid(&par, &cluster)?;
            let out = run_2d_attention(&q, &k, &v, &model, &par, &grid, true)?;
            println!(
                "d_hp={d_hp} d_cp={d_cp} w={w} {placement:<13} nodes={} max |diff| = {:.2e}",
                grid.num_nodes(),
                out.max_abs_diff(&reference)?
            );
        }
    }
    Ok(())
}

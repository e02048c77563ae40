//! Layer objective on 64 GPUs at 128K tokens: head-parallel degree against
//! all-to-all cost, and inner ring size against NIC usage.

use ring2d::cost::objective;
use ring2d::{build_rank_grid, ClusterConfig, ModelConfig, ParallelConfig, Placement};

fn main() -> ring2d::Result<()> {
    let cluster = ClusterConfig::default();
    let seq = 128 * 1024;
    for (label, model) in [
        ("MHA", ModelConfig::mha(seq, 32, 4096)),
        ("GQA", ModelConfig::gqa(seq, 32, 8, 4096)),
    ] {
        println!("{label}, d_sp = 64, single ring");
        println!("  d_hp  placement      objective  all-to-all  inner p2p  compute/step");
        for d_hp in [1, 2, 4, 8, 16, 32] {
            for placement in Placement::ALL {
                let par = ParallelConfig::new(d_hp, 64 / d_hp, 64 / d_hp, placement);
                let r = objective(&model, &par, &cluster, &build_rank_grid(&par, &cluster)?);
                println!(
                    "  {d_hp:>4}  {placement:<13} {:>8.2} ms {:>8.2} ms {:>8.3} ms {:>8.3} ms",
                    r.objective * 1e3,
                    r.t_seqalltoall * 1e3,
                    r.t_p2p_inner * 1e3,
                    r.t_comp_fwd * 1e3
                );
            }
        }
    }

    let model = ModelConfig::mha(seq, 32, 4096);
    println!("MHA, d_hp = 4, d_cp = 16, context-first");
    for w in [1, 2, 4, 8, 16] {
        let par = ParallelConfig::new(4, 16, w, Placement::ContextFirst);
        let r = objective(&model, &par, &cluster, &build_rank_grid(&par, &cluster)?);
        println!(
            "  w={w:<2} objective {:>7.2} ms  outer hop {:.3} ms",
            r.objective * 1e3,
            r.t_p2p_outer * 1e3
        );
    }
    Ok(())
}

//! Simulates one layer and writes a Chrome trace (open it in
//! chrome://tracing or Perfetto).
//!
//! cargo run --example timeline_trace -- [out.json]

use ring2d::cost::objective;
use ring2d::sim::{export_trace, simulate};
use ring2d::{build_rank_grid, ClusterConfig, ModelConfig, ParallelConfig, Placement};

fn main() -> ring2d::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "ring2d_trace.json".into());
    let cluster = ClusterConfig::default();
    let model = ModelConfig::mha(128 * 1024, 32, 4096);
    for w in [1, 4, 16] {
        let par = ParallelConfig::new(4, 16, w, Placement::ContextFirst);
        let grid = build_rank_grid(&par, &cluster)?;
        let tl = simulate(&model, &par, &cluster, &grid)?;
        let r = objective(&model, &par, &cluster, &grid);
        println!(
            "w={w:<2} makespan {:.2} ms, exposed comm {:.2} ms, objective {:.2} ms, {} events",
            tl.makespan() * 1e3,
            tl.exposed_comm() * 1e3,
            r.objective * 1e3,
            tl.events.len()
        );
        if w == 4 {
            export_trace(&tl, &out)?;
        }
    }
    println!("trace for w=4 written to {out}");
    Ok(())
}

//! Ranks every (d_hp, d_cp, w, placement) for 64 GPUs by the analytic
//! objective and by simulated makespan.

use ring2d::planner::{plan, plan_rows, PlanOptions, RankKey};
use ring2d::{ClusterConfig, ModelConfig};

fn main() -> ring2d::Result<()> {
    let cluster = ClusterConfig::default();
    let model = ModelConfig::llama7b(128 * 1024, 32);
    for key in [RankKey::Objective, RankKey::SimMakespan] {
        let ranked = plan(
            &model,
            64,
            &cluster,
            PlanOptions {
                key,
                memory_filter: false,
            },
        )?;
        println!("{key:?}: {} configurations, top 5", ranked.len());
        for row in plan_rows(&ranked).iter().take(5) {
            println!(
                "  #{} d_hp={:<2} d_cp={:<2} w={:<2} {:<13} objective {:.2} ms{}",
                row.rank,
                row.d_hp,
                row.d_cp,
                row.w,
                row.placement,
                row.objective_ms,
                row.makespan_ms
                    .map(|m| format!(", simulated {m:.2} ms"))
                    .unwrap_or_default()
            );
        }
    }
    Ok(())
}

//! How far head-only sequence parallelism scales under a global token
//! budget, what 2D parallelism buys, and activation memory per GPU.

use ring2d::cost::{bubble_rate, memory_estimate, scalability, CheckpointMode, SpMode};
use ring2d::{ModelConfig, ParallelConfig};

fn main() -> ring2d::Result<()> {
    let m = 1 << 20;
    for batch in [4 * m, 32 * m] {
        let model = ModelConfig::llama7b(m, 32).with_global_batch(batch);
        let u = scalability(&model, SpMode::Ulysses);
        let t = scalability(&model, SpMode::TwoD);
        println!(
            "S=1M, batch {}M tokens: d_dp <= {}, head-only ceiling {} GPUs, 2D ceiling {:?}",
            batch / m,
            u.max_d_dp,
            u.max_gpus.unwrap_or(0),
            t.max_gpus
        );
        for d_dp in [1, u.max_d_dp] {
            let rates: Vec<String> = [2, 4, 8]
                .iter()
                .map(|&pp| format!("pp={pp}: {:.2}", bubble_rate(&model, d_dp, pp)))
                .collect();
            println!("  bubble rate at d_dp={d_dp}: {}", rates.join(", "));
        }
    }

    let model = ModelConfig::llama7b(m, 32);
    let par = ParallelConfig::single_ring(8, 64);
    for mode in [
        CheckpointMode::Full,
        CheckpointMode::SelectivePlusPlus,
        CheckpointMode::None,
    ] {
        let r = memory_estimate(&model, &par, mode, par.d_sp())?;
        println!(
            "1M tokens on 512 GPUs, {mode:?}: {:.2} GB per GPU",
            r.total / 1e9
        );
    }
    Ok(())
}

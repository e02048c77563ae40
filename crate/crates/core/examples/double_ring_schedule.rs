//! Which KV chunk each CP rank consumes at every (outer, inner) micro-step.

use ring2d::build_ring_schedule;

fn main() -> ring2d::Result<()> {
    for (d_cp, w) in [(4, 4), (8, 4), (8, 2), (8, 1)] {
        let s = build_ring_schedule(d_cp, w)?;
        println!(
            "d_cp={d_cp} w={w}: {} inner rings, {} outer steps",
            d_cp / w,
            s.outer_steps()
        );
        for cp in 0..d_cp {
            let steps: Vec<String> = s
                .steps(cp)
                .iter()
                .map(|m| format!("o{}t{}:{}", m.outer, m.inner, m.source))
                .collect();
            println!("  rank {cp}: {}", steps.join(" "));
        }
    }
    Ok(())
}

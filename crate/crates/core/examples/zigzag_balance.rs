//! Causal attention work per CP rank with a contiguous split versus the
//! zigzag split (stripes j and 2*d_cp-1-j).

use ring2d::sharding::{causal_pairs, zigzag_reorder};

fn main() -> ring2d::Result<()> {
    let seq = 128;
    for d_cp in [2, 4, 8] {
        let zz = zigzag_reorder(seq, d_cp)?;
        let chunk = seq / d_cp;
        let contiguous: Vec<usize> = (0..d_cp)
            .map(|j| (j * chunk..(j + 1) * chunk).map(|q| q + 1).sum())
            .collect();
        let zigzag: Vec<usize> = (0..d_cp).map(|j| causal_pairs(&zz, j)).collect();
        println!("d_cp={d_cp}");
        println!("  contiguous: {contiguous:?}");
        println!("  zigzag:     {zigzag:?}");
        println!("  rank 0 holds positions {:?}..", &zz.positions_of(0)[..4]);
    }
    Ok(())
}

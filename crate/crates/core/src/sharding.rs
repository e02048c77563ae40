//! Sequence sharding, SeqAlltoAll resharding and KV head replication.
//!
//! Everything here is pure data movement: no arithmetic touches the values,
//! so round trips are bit-exact.
//!
//! Sequence layout. The sequence is cut into `2 * d_cp` equal stripes and CP
//! index `j` owns stripes `j` and `2 * d_cp - 1 - j` (zigzag), which equalizes
//! causal work across the ring. Inside HP group `j` those `S / d_cp` tokens
//! are split evenly, HP index `i` taking the `i`-th slice, so rank `(i, j)`
//! starts with `S / d_sp` tokens of every head. The scatter all-to-all then
//! hands rank `(i, j)` head slice `i` for all of CP index `j`'s tokens.

use crate::config::RankGrid;
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Scalar};

/// Zigzag token order for a CP group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZigzagPermutation {
    d_cp: usize,
    /// `order[k]` is the original position placed at permuted index `k`.
    order: Vec<usize>,
    /// `inverse[p]` is the permuted index of original position `p`.
    inverse: Vec<usize>,
}

impl ZigzagPermutation {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn seq_len(&self) -> usize {
        self.order.len()
    }

    /// Original positions owned by CP index `cp`, in local order.
    pub fn positions_of(&self, cp: usize) -> &[usize] {
        let n = self.seq_len() / self.d_cp;
        &self.order[cp * n..(cp + 1) * n]
    }
}

pub fn zigzag_reorder(seq_len: usize, d_cp: usize) -> Result<ZigzagPermutation> {
    if d_cp == 0 || !seq_len.is_multiple_of(2 * d_cp) {
        return Err(Error::Divisibility {
            what: "sequence length for zigzag stripes",
            value: seq_len,
            divisor: 2 * d_cp,
        });
    }
    let stripes = 2 * d_cp;
    let width = seq_len / stripes;
    let mut order = Vec::with_capacity(seq_len);
    for j in 0..d_cp {
        for stripe in [j, stripes - 1 - j] {
            order.extend(stripe * width..(stripe + 1) * width);
        }
    }
    let mut inverse = vec![0; seq_len];
    for (k, &p) in order.iter().enumerate() {
        inverse[p] = k;
    }
    Ok(ZigzagPermutation {
        d_cp,
        order,
        inverse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Every rank holds all heads for `S / d_sp` tokens.
    SeqSharded,
    /// Rank `(i, j)` holds head slice `i` for CP index `j`'s `S / d_cp` tokens.
    HeadSharded,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::SeqSharded => "seq-sharded",
            Layout::HeadSharded => "head-sharded",
        }
    }
}

/// One chunk per rank, indexed by physical rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedSeq<T> {
    pub chunks: Vec<DenseTensor<T>>,
    pub layout: Layout,
    pub grid: RankGrid,
}

impl<T: Scalar> ShardedSeq<T> {
    pub fn chunk_at(&self, hp: usize, cp: usize) -> &DenseTensor<T> {
        &self.chunks[self.grid.rank_of(hp, cp)]
    }

    fn expect(&self, layout: Layout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::Layout {
                expected: layout.name(),
                found: self.layout.name(),
            });
        }
        Ok(())
    }

    fn heads(&self) -> usize {
        self.chunks[0].heads()
    }
}

/// Splits a global tensor (positions `0..S` in any row order) into the
/// seq-sharded layout of `grid`.
pub fn shard_sequence<T: Scalar>(
    global: &DenseTensor<T>,
    grid: &RankGrid,
) -> Result<ShardedSeq<T>> {
    let s = global.tokens();
    let d_sp = grid.d_sp();
    if !s.is_multiple_of(2 * d_sp) {
        return Err(Error::Divisibility {
            what: "sequence length",
            value: s,
            divisor: 2 * d_sp,
        });
    }
    let sorted = global.sorted_by_position();
    if sorted.positions().iter().enumerate().any(|(i, &p)| i != p) {
        return Err(Error::Shape(
            "global tensor positions are not a permutation of 0..S".into(),
        ));
    }
    let zz = zigzag_reorder(s, grid.d_cp())?;
    let per_rank = s / d_sp;
    let mut chunks = vec![None; d_sp];
    for cp in 0..grid.d_cp() {
        let owned = zz.positions_of(cp);
        for hp in 0..grid.d_hp() {
            // sorted row index == position
            let rows = &owned[hp * per_rank..(hp + 1) * per_rank];
            chunks[grid.rank_of(hp, cp)] = Some(sorted.select_tokens(rows)?);
        }
    }
    Ok(ShardedSeq {
        chunks: chunks
            .into_iter()
            .map(|c| c.expect("bijective grid"))
            .collect(),
        layout: Layout::SeqSharded,
        grid: grid.clone(),
    })
}

/// Reassembles a seq-sharded tensor in position order.
pub fn unshard<T: Scalar>(x: &ShardedSeq<T>) -> Result<DenseTensor<T>> {
    x.expect(Layout::SeqSharded)?;
    let joined = DenseTensor::concat_tokens(&x.chunks)?.sorted_by_position();
    if joined.positions().iter().enumerate().any(|(i, &p)| i != p) {
        return Err(Error::Shape(
            "chunks do not cover every position exactly once".into(),
        ));
    }
    Ok(joined)
}

/// KV head count after replication: the least common multiple of `kv_heads`
/// and `d_hp`. Equals `max(kv_heads, d_hp)` whenever one divides the other.
pub fn replicated_kv_heads(kv_heads: usize, d_hp: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    kv_heads / gcd(kv_heads, d_hp) * d_hp
}

/// Repeats each KV head contiguously so the head count is divisible by
/// `d_hp`. A no-op when `d_hp` already divides `kv_heads`.
pub fn kv_replicate<T: Scalar>(
    x: &ShardedSeq<T>,
    kv_heads: usize,
    heads: usize,
    d_hp: usize,
) -> Result<ShardedSeq<T>> {
    x.expect(Layout::SeqSharded)?;
    if d_hp > heads {
        return Err(Error::Invalid(format!(
            "d_hp = {d_hp} exceeds the {heads} query heads"
        )));
    }
    if x.heads() != kv_heads {
        return Err(Error::Shape(format!(
            "expected {kv_heads} KV heads, chunks carry {}",
            x.heads()
        )));
    }
    let target = replicated_kv_heads(kv_heads, d_hp);
    if target > heads || !heads.is_multiple_of(target) {
        return Err(Error::Divisibility {
            what: "query heads by replicated KV heads",
            value: heads,
            divisor: target,
        });
    }
    let times = target / kv_heads;
    if times == 1 {
        return Ok(x.clone());
    }
    Ok(ShardedSeq {
        chunks: x.chunks.iter().map(|c| c.repeat_heads(times)).collect(),
        layout: Layout::SeqSharded,
        grid: x.grid.clone(),
    })
}

/// Seq-sharded to head-sharded within every HP group.
pub fn seq_alltoall_scatter<T: Scalar>(x: &ShardedSeq<T>) -> Result<ShardedSeq<T>> {
    x.expect(Layout::SeqSharded)?;
    let grid = &x.grid;
    let d_hp = grid.d_hp();
    let heads = x.heads();
    if !heads.is_multiple_of(d_hp) {
        return Err(Error::Divisibility {
            what: "heads across the HP group",
            value: heads,
            divisor: d_hp,
        });
    }
    let per = heads / d_hp;
    let mut chunks = vec![None; grid.d_sp()];
    for cp in 0..grid.d_cp() {
        for hp in 0..d_hp {
            let parts = (0..d_hp)
                .map(|src| x.chunk_at(src, cp).select_heads(hp * per..(hp + 1) * per))
                .collect::<Result<Vec<_>>>()?;
            chunks[grid.rank_of(hp, cp)] = Some(DenseTensor::concat_tokens(&parts)?);
        }
    }
    Ok(ShardedSeq {
        chunks: chunks
            .into_iter()
            .map(|c| c.expect("bijective grid"))
            .collect(),
        layout: Layout::HeadSharded,
        grid: grid.clone(),
    })
}

/// Head-sharded back to seq-sharded; inverse of [`seq_alltoall_scatter`].
pub fn seq_alltoall_gather<T: Scalar>(x: &ShardedSeq<T>) -> Result<ShardedSeq<T>> {
    x.expect(Layout::HeadSharded)?;
    let grid = &x.grid;
    let d_hp = grid.d_hp();
    let tokens = x.chunks[0].tokens();
    if !tokens.is_multiple_of(d_hp) {
        return Err(Error::Divisibility {
            what: "tokens across the HP group",
            value: tokens,
            divisor: d_hp,
        });
    }
    let per = tokens / d_hp;
    let mut chunks = vec![None; grid.d_sp()];
    for cp in 0..grid.d_cp() {
        for hp in 0..d_hp {
            let parts = (0..d_hp)
                .map(|src| x.chunk_at(src, cp).token_range(hp * per..(hp + 1) * per))
                .collect::<Result<Vec<_>>>()?;
            chunks[grid.rank_of(hp, cp)] = Some(DenseTensor::concat_heads(&parts)?);
        }
    }
    Ok(ShardedSeq {
        chunks: chunks
            .into_iter()
            .map(|c| c.expect("bijective grid"))
            .collect(),
        layout: Layout::SeqSharded,
        grid: grid.clone(),
    })
}

/// Admitted `(query, key)` pairs under a causal mask when CP index `j` owns
/// `positions_of(j)` as queries and the whole sequence as keys.
pub fn causal_pairs(zz: &ZigzagPermutation, cp: usize) -> usize {
    zz.positions_of(cp).iter().map(|&p| p + 1).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_rank_grid, ClusterConfig, ParallelConfig, Placement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(d_hp: usize, d_cp: usize, placement: Placement) -> RankGrid {
        build_rank_grid(
            &ParallelConfig::new(d_hp, d_cp, d_cp, placement),
            &ClusterConfig::default(),
        )
        .unwrap()
    }

    fn sorted(v: &[usize]) -> Vec<usize> {
        let mut v = v.to_vec();
        v.sort();
        v
    }

    #[test]
    fn zigzag_identity_for_one_rank() {
        let zz = zigzag_reorder(8, 1).unwrap();
        assert_eq!(zz.order(), &(0..8).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn zigzag_two_ranks() {
        let zz = zigzag_reorder(8, 2).unwrap();
        assert_eq!(zz.positions_of(0), &[0, 1, 6, 7]);
        assert_eq!(zz.positions_of(1), &[2, 3, 4, 5]);
        for (k, &p) in zz.order().iter().enumerate() {
            assert_eq!(zz.inverse()[p], k);
        }
    }

    #[test]
    fn zigzag_rejects_odd_split() {
        assert!(zigzag_reorder(12, 4).is_err());
        assert!(zigzag_reorder(8, 0).is_err());
    }

    #[test]
    fn shard_single_rank_is_input() {
        let x = DenseTensor::<f64>::random(2, 8, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let s = shard_sequence(&x, &grid(1, 1, Placement::HeadFirst)).unwrap();
        assert_eq!(s.chunks, vec![x]);
    }

    #[test]
    fn shard_two_by_two() {
        let x = DenseTensor::<f64>::random(4, 8, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let g = grid(2, 2, Placement::HeadFirst);
        let s = shard_sequence(&x, &g).unwrap();
        let mut all = Vec::new();
        for c in &s.chunks {
            assert_eq!(c.tokens(), 2);
            all.extend_from_slice(c.positions());
        }
        assert_eq!(sorted(&all), (0..8).collect::<Vec<_>>());
        assert_eq!(s.chunk_at(0, 0).positions(), &[0, 1]);
        assert_eq!(s.chunk_at(1, 0).positions(), &[6, 7]);
        assert_eq!(unshard(&s).unwrap(), x);
    }

    #[test]
    fn scatter_two_by_two() {
        let x = DenseTensor::<f64>::random(4, 8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        for placement in Placement::ALL {
            let g = grid(2, 2, placement);
            let hs = seq_alltoall_scatter(&shard_sequence(&x, &g).unwrap()).unwrap();
            let c = hs.chunk_at(0, 0);
            assert_eq!(c.heads(), 2);
            assert_eq!(c.positions(), &[0, 1, 6, 7]);
            assert_eq!(c.row(1, 2), x.row(1, 6));
            let c = hs.chunk_at(1, 1);
            assert_eq!(c.positions(), &[2, 3, 4, 5]);
            assert_eq!(c.row(0, 0), x.row(2, 2));
        }
    }

    #[test]
    fn scatter_is_identity_without_head_parallelism() {
        let x = DenseTensor::<f64>::random(2, 16, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let s = shard_sequence(&x, &grid(1, 4, Placement::HeadFirst)).unwrap();
        let hs = seq_alltoall_scatter(&s).unwrap();
        assert_eq!(hs.chunks, s.chunks);
        assert_eq!(hs.layout, Layout::HeadSharded);
    }

    #[test]
    fn scatter_gather_round_trips() {
        let x = DenseTensor::<f64>::random(8, 32, 2, &mut ChaCha8Rng::seed_from_u64(5));
        for (d_hp, d_cp) in [(2, 2), (4, 2), (2, 4), (8, 1)] {
            let s = shard_sequence(&x, &grid(d_hp, d_cp, Placement::ContextFirst)).unwrap();
            let back = seq_alltoall_gather(&seq_alltoall_scatter(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let x = DenseTensor::<f64>::random(2, 8, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let s = shard_sequence(&x, &grid(2, 2, Placement::HeadFirst)).unwrap();
        assert!(seq_alltoall_gather(&s).is_err());
        let hs = seq_alltoall_scatter(&s).unwrap();
        assert!(seq_alltoall_scatter(&hs).is_err());
        assert!(unshard(&hs).is_err());
    }

    #[test]
    fn replication_counts() {
        assert_eq!(replicated_kv_heads(8, 4), 8);
        assert_eq!(replicated_kv_heads(8, 16), 16);
        assert_eq!(replicated_kv_heads(8, 32), 32);
        assert_eq!(replicated_kv_heads(4, 6), 12);
    }

    #[test]
    fn replicate_duplicates_contiguously() {
        let kv = DenseTensor::<f64>::random(2, 16, 2, &mut ChaCha8Rng::seed_from_u64(7));
        let g = grid(4, 2, Placement::HeadFirst);
        let s = shard_sequence(&kv, &g).unwrap();
        let r = kv_replicate(&s, 2, 8, 4).unwrap();
        for (a, b) in r.chunks.iter().zip(&s.chunks) {
            assert_eq!(a.heads(), 4);
            assert_eq!(a.select_heads(0..1).unwrap(), b.select_heads(0..1).unwrap());
            assert_eq!(a.select_heads(1..2).unwrap(), b.select_heads(0..1).unwrap());
            assert_eq!(a.select_heads(3..4).unwrap(), b.select_heads(1..2).unwrap());
        }
        assert_eq!(kv_replicate(&s, 2, 8, 2).unwrap(), s);
        assert!(kv_replicate(&s, 2, 8, 16).is_err());
    }

    #[test]
    fn zigzag_balances_causal_work() {
        let zz = zigzag_reorder(16, 4).unwrap();
        let counts: Vec<_> = (0..4).map(|j| causal_pairs(&zz, j)).collect();
        assert!(counts.iter().all(|&c| c == counts[0]), "{counts:?}");
    }
}

//! Double-ring attention inside a CP group, and the full 2D pipeline.
//!
//! A CP group of `d_cp` ranks is cut into `d_cp / w` inner rings of `w`
//! consecutive CP indices. During one outer step every inner ring runs a
//! classic ring pass of `w` micro-steps; between outer steps each rank takes
//! the chunk its predecessor in the previous inner ring started with. Rank at
//! ring `r`, position `p` therefore consumes, at outer step `o` and inner step
//! `t`, the chunk that originated at ring `r - o`, position `p - t` (both
//! modulo their ring counts).

use rayon::prelude::*;

use crate::config::{ModelConfig, ParallelConfig, RankGrid};
use crate::error::{Error, Result};
use crate::oracle::{block_attention, merge_into, BlockResult};
use crate::sharding::{
    kv_replicate, seq_alltoall_gather, seq_alltoall_scatter, shard_sequence, unshard, Layout,
    ShardedSeq,
};
use crate::tensor::{DenseTensor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MicroStep {
    pub outer: usize,
    pub inner: usize,
    /// CP index whose KV chunk is consumed.
    pub source: usize,
}

/// Per-CP-rank consumption order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingSchedule {
    d_cp: usize,
    inner_ring: usize,
    steps: Vec<Vec<MicroStep>>,
}

impl RingSchedule {
    pub fn d_cp(&self) -> usize {
        self.d_cp
    }
    pub fn inner_ring(&self) -> usize {
        self.inner_ring
    }
    pub fn outer_steps(&self) -> usize {
        self.d_cp / self.inner_ring
    }

    /// Micro-steps of CP rank `cp`, in fold order.
    pub fn steps(&self, cp: usize) -> &[MicroStep] {
        &self.steps[cp]
    }

    pub fn sources(&self, cp: usize) -> Vec<usize> {
        self.steps[cp].iter().map(|s| s.source).collect()
    }
}

pub fn build_ring_schedule(d_cp: usize, inner_ring: usize) -> Result<RingSchedule> {
    if inner_ring == 0 || d_cp == 0 || !d_cp.is_multiple_of(inner_ring) {
        return Err(Error::Divisibility {
            what: "CP group by inner ring size",
            value: d_cp,
            divisor: inner_ring,
        });
    }
    let w = inner_ring;
    let rings = d_cp / w;
    let steps = (0..d_cp)
        .map(|cp| {
            let (r, p) = (cp / w, cp % w);
            (0..rings)
                .flat_map(|o| {
                    (0..w).map(move |t| MicroStep {
                        outer: o,
                        inner: t,
                        source: ((r + rings - o) % rings) * w + (p + w - t) % w,
                    })
                })
                .collect()
        })
        .collect();
    Ok(RingSchedule {
        d_cp,
        inner_ring,
        steps,
    })
}

/// Runs one CP group. `q`, `k`, `v` are indexed by CP index; rank `j` folds
/// its query chunk against every KV chunk in schedule order.
pub fn run_double_ring<T: Scalar>(
    q: &[DenseTensor<T>],
    k: &[DenseTensor<T>],
    v: &[DenseTensor<T>],
    schedule: &RingSchedule,
    causal: bool,
) -> Result<Vec<BlockResult<T>>> {
    let d_cp = schedule.d_cp();
    if q.len() != d_cp || k.len() != d_cp || v.len() != d_cp {
        return Err(Error::Shape(format!(
            "schedule covers {d_cp} ranks, got {} / {} / {} chunks",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    (0..d_cp)
        .into_par_iter()
        .map(|cp| {
            let qj = &q[cp];
            let mut acc = BlockResult::empty(qj.heads(), qj.head_dim(), qj.positions().to_vec());
            for step in schedule.steps(cp) {
                let blk = block_attention(qj, &k[step.source], &v[step.source], causal)?;
                merge_into(&mut acc, &blk)?;
            }
            Ok(acc)
        })
        .collect()
}

/// Intermediate layouts of one [`run_2d_attention`] call, for inspection.
#[derive(Debug, Clone)]
pub struct TwoDRun<T> {
    /// Q after the scatter all-to-all.
    pub q_heads: ShardedSeq<T>,
    /// Replicated K after the scatter all-to-all.
    pub k_heads: ShardedSeq<T>,
    pub schedule: RingSchedule,
    /// Attention output, still seq-sharded.
    pub out_seq: ShardedSeq<T>,
    /// Output in position order.
    pub output: DenseTensor<T>,
}

/// Replica, SeqAlltoAll, per-CP-group double ring, SeqAlltoAll; then the
/// zigzag is undone. Equals [`crate::full_attention`] on the global tensors.
pub fn run_2d_attention<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    model: &ModelConfig,
    par: &ParallelConfig,
    grid: &RankGrid,
    causal: bool,
) -> Result<DenseTensor<T>> {
    Ok(run_2d_attention_traced(q, k, v, model, par, grid, causal)?.output)
}

pub fn run_2d_attention_traced<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    model: &ModelConfig,
    par: &ParallelConfig,
    grid: &RankGrid,
    causal: bool,
) -> Result<TwoDRun<T>> {
    if q.heads() != model.heads || k.heads() != model.kv_heads || q.tokens() != model.seq_len {
        return Err(Error::Shape(format!(
            "Q {:?} / K {:?} do not match H = {}, H_kv = {}, S = {}",
            q.shape(),
            k.shape(),
            model.heads,
            model.kv_heads,
            model.seq_len
        )));
    }
    if (grid.d_hp(), grid.d_cp(), grid.inner_ring()) != (par.d_hp, par.d_cp, par.inner_ring) {
        return Err(Error::Invalid(
            "rank grid was built for another config".into(),
        ));
    }

    let qs = shard_sequence(q, grid)?;
    let ks = kv_replicate(
        &shard_sequence(k, grid)?,
        model.kv_heads,
        model.heads,
        par.d_hp,
    )?;
    let vs = kv_replicate(
        &shard_sequence(v, grid)?,
        model.kv_heads,
        model.heads,
        par.d_hp,
    )?;

    let q_heads = seq_alltoall_scatter(&qs)?;
    let k_heads = seq_alltoall_scatter(&ks)?;
    let v_heads = seq_alltoall_scatter(&vs)?;

    let schedule = build_ring_schedule(par.d_cp, par.inner_ring)?;
    let mut out_chunks: Vec<Option<DenseTensor<T>>> = vec![None; grid.d_sp()];
    for hp in 0..par.d_hp {
        let group = grid.cp_group(hp);
        let pick = |x: &ShardedSeq<T>| -> Vec<DenseTensor<T>> {
            group.iter().map(|&r| x.chunks[r].clone()).collect()
        };
        let results = run_double_ring(
            &pick(&q_heads),
            &pick(&k_heads),
            &pick(&v_heads),
            &schedule,
            causal,
        )?;
        for (&rank, res) in group.iter().zip(results) {
            out_chunks[rank] = Some(res.out);
        }
    }
    let out_heads = ShardedSeq {
        chunks: out_chunks
            .into_iter()
            .map(|c| c.expect("every rank belongs to one CP group"))
            .collect(),
        layout: Layout::HeadSharded,
        grid: grid.clone(),
    };
    let out_seq = seq_alltoall_gather(&out_heads)?;
    let output = unshard(&out_seq)?;
    Ok(TwoDRun {
        q_heads,
        k_heads,
        schedule,
        out_seq,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_rank_grid, ClusterConfig, Placement};
    use crate::oracle::full_attention;
    use crate::sharding::zigzag_reorder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classic_ring_order() {
        let s = build_ring_schedule(4, 4).unwrap();
        for r in 0..4 {
            let expected: Vec<_> = (0..4).map(|t| (r + 4 - t) % 4).collect();
            assert_eq!(s.sources(r), expected);
        }
    }

    #[test]
    fn two_inner_rings_of_four() {
        let s = build_ring_schedule(8, 4).unwrap();
        assert_eq!(s.outer_steps(), 2);
        assert_eq!(s.sources(5), vec![5, 4, 7, 6, 1, 0, 3, 2]);
        for r in 0..8 {
            let mut seen = s.sources(r);
            seen.sort();
            assert_eq!(seen, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pure_outer_ring() {
        let s = build_ring_schedule(8, 1).unwrap();
        assert_eq!(s.outer_steps(), 8);
        assert_eq!(s.sources(2), vec![2, 1, 0, 7, 6, 5, 4, 3]);
        assert!(s.steps(2).iter().all(|m| m.inner == 0));
    }

    #[test]
    fn schedule_rejects_bad_ring() {
        assert!(build_ring_schedule(8, 3).is_err());
        assert!(build_ring_schedule(8, 0).is_err());
    }

    fn random_qkv(h: usize, h_kv: usize, s: usize, d: usize, seed: u64) -> [DenseTensor<f64>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            DenseTensor::random(h, s, d, &mut rng),
            DenseTensor::random(h_kv, s, d, &mut rng),
            DenseTensor::random(h_kv, s, d, &mut rng),
        ]
    }

    #[test]
    fn single_rank_ring_is_local_attention() {
        let [q, k, v] = random_qkv(2, 2, 8, 4, 1);
        let s = build_ring_schedule(1, 1).unwrap();
        let out = run_double_ring(
            std::slice::from_ref(&q),
            std::slice::from_ref(&k),
            std::slice::from_ref(&v),
            &s,
            true,
        )
        .unwrap();
        let (o, _) = full_attention(&q, &k, &v, true).unwrap();
        assert!(out[0].out.max_abs_diff(&o).unwrap() < 1e-15);
    }

    #[test]
    fn inner_ring_size_does_not_change_values() {
        let [q, k, v] = random_qkv(2, 1, 16, 4, 2);
        let zz = zigzag_reorder(16, 4).unwrap();
        let split = |x: &DenseTensor<f64>| -> Vec<_> {
            (0..4)
                .map(|j| x.select_tokens(zz.positions_of(j)).unwrap())
                .collect()
        };
        let (qs, ks, vs) = (split(&q), split(&k), split(&v));
        let (o, _) = full_attention(&q, &k, &v, true).unwrap();
        for w in [1, 2, 4] {
            let res =
                run_double_ring(&qs, &ks, &vs, &build_ring_schedule(4, w).unwrap(), true).unwrap();
            for (j, r) in res.iter().enumerate() {
                let expect = o.select_tokens(zz.positions_of(j)).unwrap();
                assert!(r.out.max_abs_diff(&expect).unwrap() < 1e-12, "w={w} j={j}");
            }
        }
    }

    #[test]
    fn two_d_matches_oracle_small_grid() {
        let model = ModelConfig::gqa(16, 4, 2, 16);
        let [q, k, v] = random_qkv(4, 2, 16, 4, 3);
        let (o, _) = full_attention(&q, &k, &v, true).unwrap();
        for placement in Placement::ALL {
            let par = ParallelConfig::new(4, 2, 1, placement);
            let grid = build_rank_grid(&par, &ClusterConfig::default()).unwrap();
            let got = run_2d_attention(&q, &k, &v, &model, &par, &grid, true).unwrap();
            assert!(got.max_abs_diff(&o).unwrap() < 1e-12);
        }
    }

    #[test]
    fn two_d_rejects_mismatched_model() {
        let model = ModelConfig::gqa(16, 4, 2, 16);
        let [q, k, v] = random_qkv(4, 4, 16, 4, 4);
        let par = ParallelConfig::single_ring(2, 2);
        let grid = build_rank_grid(&par, &ClusterConfig::default()).unwrap();
        assert!(run_2d_attention(&q, &k, &v, &model, &par, &grid, false).is_err());
    }
}

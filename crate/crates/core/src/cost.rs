//! Closed-form cost and memory model for one attention layer.
//!
//! Per micro-step forward compute is `alpha * S^2 * D / (d_cp * d_sp)` and
//! backward is three times that. A KV chunk is
//! `H_kv_hat / H * 4 * S * D / d_sp` bytes at FP16, and backward moves twice
//! as much (chunks plus their gradients). One inner ring costs
//! `A * (w - 1) + B` with `A = max(T_comp, T_p2p_inner)` and
//! `B = max(T_comp, T_p2p_outer)`; the layer objective is
//! `T_seqalltoall + (T_ring_fwd + T_ring_bwd) * d_cp / w`.
//!
//! Transfers follow a latency + bandwidth model. A NIC is shared evenly by
//! the inter-node flows of its node, so an inter-node hop is slowed by
//! `max(1, flows_per_node / nics_per_node)`.

use serde::Serialize;

use crate::config::{ClusterConfig, ModelConfig, ParallelConfig, RankGrid};
use crate::error::{Error, Result};
use crate::sharding::replicated_kv_heads;

/// Bytes moved by a backward P2P relative to forward.
pub const BACKWARD_P2P_FACTOR: f64 = 2.0;
/// Backward compute relative to forward.
pub const BACKWARD_COMPUTE_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Forward, Phase::Backward];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Forward => "fwd",
            Phase::Backward => "bwd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    IntraNvlink,
    InterNic,
}

impl LinkClass {
    pub fn name(self) -> &'static str {
        match self {
            LinkClass::IntraNvlink => "nvlink",
            LinkClass::InterNic => "nic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HopKind {
    Inner,
    Outer,
}

/// Forward or backward compute of one micro-step.
pub fn comp_time(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    phase: Phase,
) -> f64 {
    let s = model.seq_len as f64;
    let fwd = cluster.alpha() * s * s * model.hidden as f64 / (par.d_cp * par.d_sp()) as f64;
    // two clear low mantissa bits make 3 * fwd exact, so bwd / fwd == 3
    let fwd = f64::from_bits(fwd.to_bits() & !3);
    match phase {
        Phase::Forward => fwd,
        Phase::Backward => BACKWARD_COMPUTE_FACTOR * fwd,
    }
}

/// Bytes of one K+V chunk after replication.
pub fn size_kv(model: &ModelConfig, par: &ParallelConfig) -> f64 {
    let kv_hat = replicated_kv_heads(model.kv_heads, par.d_hp) as u128;
    let num = kv_hat * 2 * model.elem_bytes as u128 * model.seq_len as u128 * model.hidden as u128;
    num as f64 / (model.heads as u128 * par.d_sp() as u128) as f64
}

/// Bytes of a Q chunk; also the size of an output chunk.
pub fn size_q(model: &ModelConfig, par: &ParallelConfig) -> f64 {
    (model.elem_bytes as u128 * model.seq_len as u128 * model.hidden as u128) as f64
        / par.d_sp() as f64
}

pub fn link_latency(link: LinkClass, cluster: &ClusterConfig) -> f64 {
    match link {
        LinkClass::IntraNvlink => cluster.p2p_latency_intra,
        LinkClass::InterNic => cluster.p2p_latency_inter,
    }
}

pub fn link_bandwidth(link: LinkClass, cluster: &ClusterConfig) -> f64 {
    match link {
        LinkClass::IntraNvlink => cluster.nvlink_bw,
        LinkClass::InterNic => cluster.nic_bw,
    }
}

/// `latency + bytes * contention / bandwidth`.
pub fn p2p_time(bytes: f64, link: LinkClass, contention: f64, cluster: &ClusterConfig) -> f64 {
    link_latency(link, cluster) + bytes * contention / link_bandwidth(link, cluster)
}

pub fn link_class(grid: &RankGrid, from: usize, to: usize) -> LinkClass {
    if grid.same_node(from, to) {
        LinkClass::IntraNvlink
    } else {
        LinkClass::InterNic
    }
}

/// Destination rank of `rank`'s hop, or `None` when the hop would target the
/// rank itself (ring of one).
pub fn hop_target(grid: &RankGrid, rank: usize, kind: HopKind) -> Option<usize> {
    let c = grid.coord(rank);
    let next = match kind {
        HopKind::Inner => grid.inner_next(c.cp),
        HopKind::Outer => grid.outer_next(c.cp),
    };
    (next != c.cp).then(|| grid.rank_of(c.hp, next))
}

/// Slowdown of inter-node hops of `kind`: the busiest node's count of
/// concurrent off-node flows, shared across its NICs, floored at 1.
pub fn hop_contention(grid: &RankGrid, cluster: &ClusterConfig, kind: HopKind) -> f64 {
    let mut flows = vec![0usize; grid.num_nodes()];
    for rank in 0..grid.d_sp() {
        if let Some(dst) = hop_target(grid, rank, kind) {
            if !grid.same_node(rank, dst) {
                flows[grid.node_of(rank)] += 1;
            }
        }
    }
    let busiest = flows.into_iter().max().unwrap_or(0) as f64;
    (busiest / cluster.nics_per_node as f64).max(1.0)
}

/// Duration of `rank`'s hop of `kind` carrying `bytes`, or `None` if the hop
/// does not exist.
pub fn hop_time(
    grid: &RankGrid,
    cluster: &ClusterConfig,
    rank: usize,
    kind: HopKind,
    bytes: f64,
) -> Option<f64> {
    let dst = hop_target(grid, rank, kind)?;
    Some(match link_class(grid, rank, dst) {
        LinkClass::IntraNvlink => p2p_time(bytes, LinkClass::IntraNvlink, 1.0, cluster),
        LinkClass::InterNic => p2p_time(
            bytes,
            LinkClass::InterNic,
            hop_contention(grid, cluster, kind),
            cluster,
        ),
    })
}

fn p2p_bytes(model: &ModelConfig, par: &ParallelConfig, phase: Phase) -> f64 {
    match phase {
        Phase::Forward => size_kv(model, par),
        Phase::Backward => BACKWARD_P2P_FACTOR * size_kv(model, par),
    }
}

/// Slowest hop of `kind` over the whole grid; 0 if there is none.
fn slowest_hop(grid: &RankGrid, cluster: &ClusterConfig, kind: HopKind, bytes: f64) -> f64 {
    (0..grid.d_sp())
        .filter_map(|r| hop_time(grid, cluster, r, kind, bytes))
        .fold(0.0, f64::max)
}

/// `(T_p2p_inner, T_p2p_outer)` for one phase. With a single inner ring the
/// outer term falls back to the inner ring's wrap hop.
pub fn p2p_times(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    grid: &RankGrid,
    phase: Phase,
) -> (f64, f64) {
    let bytes = p2p_bytes(model, par, phase);
    let inner = slowest_hop(grid, cluster, HopKind::Inner, bytes);
    let outer = if par.outer_steps() > 1 {
        slowest_hop(grid, cluster, HopKind::Outer, bytes)
    } else {
        inner
    };
    (inner, outer)
}

/// `A * (w - 1) + B` for one phase.
pub fn inner_ring_time(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    grid: &RankGrid,
    phase: Phase,
) -> f64 {
    let comp = comp_time(model, par, cluster, phase);
    let (inner, outer) = p2p_times(model, par, cluster, grid, phase);
    let a = comp.max(inner);
    let b = comp.max(outer);
    a * (par.inner_ring - 1) as f64 + b
}

/// Bytes each GPU sends in the SeqAlltoAlls of one phase:
/// `(Size(q) + Size(k) + Size(v) + Size(out)) * (d_hp - 1) / d_hp`, with K
/// and V at their replicated size.
pub fn alltoall_volume(model: &ModelConfig, par: &ParallelConfig) -> f64 {
    let d_hp = par.d_hp as f64;
    (2.0 * size_q(model, par) + size_kv(model, par)) * (d_hp - 1.0) / d_hp
}

/// Link class of the SeqAlltoAll: NVLINK only if every HP group fits on one
/// node.
pub fn alltoall_class(grid: &RankGrid) -> LinkClass {
    let spans = (0..grid.d_cp()).any(|cp| {
        let g = grid.hp_group(cp);
        g.iter().any(|&r| !grid.same_node(r, g[0]))
    });
    if spans {
        LinkClass::InterNic
    } else {
        LinkClass::IntraNvlink
    }
}

/// NIC sharing factor of an inter-node all-to-all: every GPU of a node sends
/// at once.
pub fn alltoall_contention(grid: &RankGrid, cluster: &ClusterConfig) -> f64 {
    let per_node = grid.d_sp().min(grid.gpus_per_node()) as f64;
    (per_node / cluster.nics_per_node as f64).max(1.0)
}

pub fn alltoall_time(volume: f64, grid: &RankGrid, cluster: &ClusterConfig) -> f64 {
    match alltoall_class(grid) {
        LinkClass::IntraNvlink => cluster.alltoall_latency + volume / cluster.nvlink_bw,
        LinkClass::InterNic => {
            cluster.alltoall_latency + volume * alltoall_contention(grid, cluster) / cluster.nic_bw
        }
    }
}

/// Per-phase all-to-all volumes: `(QKV scatter, output gather)`. Backward
/// mirrors them (dO scatter, dQKV gather).
pub fn alltoall_split(model: &ModelConfig, par: &ParallelConfig) -> (f64, f64) {
    let frac = (par.d_hp as f64 - 1.0) / par.d_hp as f64;
    (
        (size_q(model, par) + size_kv(model, par)) * frac,
        size_q(model, par) * frac,
    )
}

/// Total SeqAlltoAll time of a forward + backward layer: four collectives,
/// none when `d_hp = 1`.
pub fn seqalltoall_time(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    grid: &RankGrid,
) -> f64 {
    if par.d_hp == 1 {
        return 0.0;
    }
    let (qkv, out) = alltoall_split(model, par);
    2.0 * (alltoall_time(qkv, grid, cluster) + alltoall_time(out, grid, cluster))
}

/// Bytes sent per layer (forward + backward), summed over all ranks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinkVolumes {
    pub p2p_nvlink: f64,
    pub p2p_nic: f64,
    pub alltoall_nvlink: f64,
    pub alltoall_nic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub t_comp_fwd: f64,
    pub t_comp_bwd: f64,
    pub size_kv: f64,
    pub size_q: f64,
    pub size_out: f64,
    pub t_p2p_inner: f64,
    pub t_p2p_outer: f64,
    pub t_p2p_inner_bwd: f64,
    pub t_p2p_outer_bwd: f64,
    pub t_inner_ring_fwd: f64,
    pub t_inner_ring_bwd: f64,
    pub alltoall_volume: f64,
    pub t_seqalltoall: f64,
    /// Bytes of a backward P2P relative to forward.
    pub bwd_p2p_factor: f64,
    /// `d_cp * (T_comp_fwd + T_comp_bwd)`.
    pub total_compute: f64,
    pub objective: f64,
    pub volumes: LinkVolumes,
}

/// Every term of the layer objective.
pub fn objective(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    grid: &RankGrid,
) -> CostReport {
    let t_comp_fwd = comp_time(model, par, cluster, Phase::Forward);
    let t_comp_bwd = comp_time(model, par, cluster, Phase::Backward);
    let (t_p2p_inner, t_p2p_outer) = p2p_times(model, par, cluster, grid, Phase::Forward);
    let (t_p2p_inner_bwd, t_p2p_outer_bwd) = p2p_times(model, par, cluster, grid, Phase::Backward);
    let t_inner_ring_fwd = inner_ring_time(model, par, cluster, grid, Phase::Forward);
    let t_inner_ring_bwd = inner_ring_time(model, par, cluster, grid, Phase::Backward);
    let t_seqalltoall = seqalltoall_time(model, par, cluster, grid);
    let rings = par.outer_steps() as f64;
    CostReport {
        t_comp_fwd,
        t_comp_bwd,
        size_kv: size_kv(model, par),
        size_q: size_q(model, par),
        size_out: size_q(model, par),
        t_p2p_inner,
        t_p2p_outer,
        t_p2p_inner_bwd,
        t_p2p_outer_bwd,
        t_inner_ring_fwd,
        t_inner_ring_bwd,
        alltoall_volume: alltoall_volume(model, par),
        t_seqalltoall,
        bwd_p2p_factor: BACKWARD_P2P_FACTOR,
        total_compute: par.d_cp as f64 * (t_comp_fwd + t_comp_bwd),
        objective: t_seqalltoall + (t_inner_ring_fwd + t_inner_ring_bwd) * rings,
        volumes: link_volumes(model, par, grid),
    }
}

fn link_volumes(model: &ModelConfig, par: &ParallelConfig, grid: &RankGrid) -> LinkVolumes {
    let mut v = LinkVolumes::default();
    // fwd + bwd bytes per transfer
    let kv = size_kv(model, par) * (1.0 + BACKWARD_P2P_FACTOR);
    let rings = par.outer_steps();
    let per_rank = [
        (HopKind::Inner, (par.inner_ring - 1) * rings),
        (HopKind::Outer, rings - 1),
    ];
    for rank in 0..grid.d_sp() {
        for (kind, count) in per_rank {
            let Some(dst) = hop_target(grid, rank, kind) else {
                continue;
            };
            let bytes = kv * count as f64;
            match link_class(grid, rank, dst) {
                LinkClass::IntraNvlink => v.p2p_nvlink += bytes,
                LinkClass::InterNic => v.p2p_nic += bytes,
            }
        }
    }
    if par.d_hp > 1 {
        let total = 2.0 * alltoall_volume(model, par) * grid.d_sp() as f64;
        match alltoall_class(grid) {
            LinkClass::IntraNvlink => v.alltoall_nvlink = total,
            LinkClass::InterNic => v.alltoall_nic = total,
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Whole-layer checkpointing: only the layer input is kept.
    Full,
    /// Full checkpointing plus the attention output and its LSE.
    SelectivePlusPlus,
    /// No checkpointing of the attention block: QKV and LSE are kept.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub activation_per_layer: f64,
    pub scpp_extra_per_layer: f64,
    pub kv_buffers: f64,
    pub model_states: f64,
    /// `layers * (activation + extra) + kv_buffers + model_states`.
    pub total: f64,
}

pub fn memory_estimate(
    model: &ModelConfig,
    par: &ParallelConfig,
    checkpoint: CheckpointMode,
    zero_shard_degree: usize,
) -> Result<MemoryReport> {
    let max_shards = par.d_dp * par.d_sp();
    if zero_shard_degree == 0 || zero_shard_degree > max_shards {
        return Err(Error::Invalid(format!(
            "ZeRO sharding degree {zero_shard_degree} outside 1..={max_shards} (d_dp * d_sp)"
        )));
    }
    let d_sp = par.d_sp() as f64;
    let sd = (model.seq_len * model.hidden) as f64;
    let sh = (model.seq_len * model.heads) as f64;
    let elem = model.elem_bytes as f64;
    let lse = model.lse_bytes as f64;
    let layer_input = elem * sd / d_sp;
    let (activation_per_layer, scpp_extra_per_layer) = match checkpoint {
        CheckpointMode::Full => (layer_input, 0.0),
        CheckpointMode::SelectivePlusPlus => (layer_input, (elem * sd + lse * sh) / d_sp),
        CheckpointMode::None => ((3.0 * elem * sd + lse * sh) / d_sp, 0.0),
    };
    let buffers = if par.inner_ring < par.d_cp { 2.0 } else { 1.0 };
    let kv_buffers = buffers * size_kv(model, par);
    let model_states = model.model_state_bytes() / zero_shard_degree as f64;
    let total = model.layers as f64 * (activation_per_layer + scpp_extra_per_layer)
        + kv_buffers
        + model_states;
    Ok(MemoryReport {
        activation_per_layer,
        scpp_extra_per_layer,
        kv_buffers,
        model_states,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpMode {
    /// Head parallelism only: `d_sp <= H`.
    Ulysses,
    /// Head x context parallelism: `d_sp` unbounded.
    TwoD,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalabilityReport {
    pub mode: SpMode,
    pub max_d_dp: usize,
    /// `None` means unbounded.
    pub max_d_sp: Option<usize>,
    /// `None` means unbounded.
    pub max_gpus: Option<usize>,
}

/// GPU ceiling without pipeline parallelism under the global batch limit.
pub fn scalability(model: &ModelConfig, mode: SpMode) -> ScalabilityReport {
    let max_d_dp = model.global_batch / model.seq_len.max(1);
    let max_d_sp = match mode {
        SpMode::Ulysses => Some(model.heads),
        SpMode::TwoD => None,
    };
    ScalabilityReport {
        mode,
        max_d_dp,
        max_d_sp,
        max_gpus: max_d_sp.map(|sp| sp * max_d_dp),
    }
}

/// 1F1B bubble ratio `(p - 1) / m` with `m = floor(B / (S * d_dp))`
/// micro-batches; infinite when no micro-batch fits.
pub fn bubble_rate(model: &ModelConfig, d_dp: usize, pipeline_stages: usize) -> f64 {
    let micro_batches = model.global_batch / (model.seq_len * d_dp.max(1));
    if micro_batches == 0 {
        return f64::INFINITY;
    }
    pipeline_stages.saturating_sub(1) as f64 / micro_batches as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_rank_grid, Placement};

    const K128: usize = 128 * 1024;

    fn grid(par: &ParallelConfig, c: &ClusterConfig) -> RankGrid {
        build_rank_grid(par, c).unwrap()
    }

    #[test]
    fn backward_is_three_times_forward() {
        let c = ClusterConfig::default();
        for (d_hp, d_cp) in [(1, 64), (8, 8), (32, 2)] {
            let m = ModelConfig::llama7b(K128, 8);
            let par = ParallelConfig::single_ring(d_hp, d_cp);
            let f = comp_time(&m, &par, &c, Phase::Forward);
            let b = comp_time(&m, &par, &c, Phase::Backward);
            assert_eq!(b / f, 3.0);
        }
    }

    #[test]
    fn compute_scales_with_sequence_and_split() {
        let c = ClusterConfig::default();
        let par = ParallelConfig::single_ring(2, 4);
        let a = comp_time(&ModelConfig::mha(1024, 8, 64), &par, &c, Phase::Forward);
        let b = comp_time(&ModelConfig::mha(2048, 8, 64), &par, &c, Phase::Forward);
        assert!((b / a - 4.0).abs() < 1e-12);
        // same d_sp, d_hp doubled -> d_cp halved -> per-step time doubles
        let par2 = ParallelConfig::single_ring(4, 2);
        let d = comp_time(&ModelConfig::mha(1024, 8, 64), &par2, &c, Phase::Forward);
        assert!((d / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kv_chunk_sizes() {
        let mha = ModelConfig::mha(K128, 32, 4096);
        let gqa = ModelConfig::gqa(K128, 32, 8, 4096);
        let par = ParallelConfig::single_ring(1, 8);
        assert_eq!(size_kv(&mha, &par), 256.0 * 1024.0 * 1024.0);
        assert_eq!(size_kv(&gqa, &par), 67_108_864.0);
        let hp32 = ParallelConfig::single_ring(32, 1);
        assert_eq!(size_kv(&gqa, &hp32), size_kv(&mha, &hp32));
    }

    #[test]
    fn p2p_time_terms() {
        let c = ClusterConfig::default();
        assert_eq!(
            p2p_time(0.0, LinkClass::InterNic, 1.0, &c),
            c.p2p_latency_inter
        );
        let mib64 = 64.0 * 1024.0 * 1024.0;
        let t = p2p_time(mib64, LinkClass::InterNic, 1.0, &c) - c.p2p_latency_inter;
        assert!((t - 2.68435456e-3).abs() < 1e-15);
        let t2 = p2p_time(mib64, LinkClass::InterNic, 2.0, &c) - c.p2p_latency_inter;
        assert!((t2 - 2.0 * t).abs() < 1e-15);
    }

    #[test]
    fn alltoall_volume_cases() {
        let mha = ModelConfig::mha(4096, 32, 512);
        assert_eq!(
            alltoall_volume(&mha, &ParallelConfig::single_ring(1, 8)),
            0.0
        );
        let par = ParallelConfig::single_ring(2, 4);
        let sd = 4096.0 * 512.0;
        assert_eq!(alltoall_volume(&mha, &par), 4.0 * sd / 8.0);
        let gqa = ModelConfig::gqa(4096, 32, 8, 512);
        let mut last = 0.0;
        for d_hp in [1, 2, 4, 8, 16, 32] {
            let v = alltoall_volume(&gqa, &ParallelConfig::single_ring(d_hp, 64 / d_hp));
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn alltoall_class_follows_placement() {
        let c = ClusterConfig::default();
        let hf = ParallelConfig::new(8, 8, 8, Placement::HeadFirst);
        let cf = ParallelConfig::new(8, 8, 8, Placement::ContextFirst);
        assert_eq!(alltoall_class(&grid(&hf, &c)), LinkClass::IntraNvlink);
        assert_eq!(alltoall_class(&grid(&cf, &c)), LinkClass::InterNic);
        let g = grid(&hf, &c);
        assert_eq!(alltoall_time(0.0, &g, &c), c.alltoall_latency);
        let gc = grid(&cf, &c);
        let v = 1e8;
        let t = alltoall_time(v, &gc, &c) - c.alltoall_latency;
        assert!((t - v * 2.0 / c.nic_bw).abs() < 1e-15);
    }

    #[test]
    fn single_micro_step_ring_is_b() {
        let c = ClusterConfig::default();
        let m = ModelConfig::mha(K128, 32, 4096);
        let par = ParallelConfig::new(1, 64, 1, Placement::HeadFirst);
        let g = grid(&par, &c);
        let comp = comp_time(&m, &par, &c, Phase::Forward);
        let (_, outer) = p2p_times(&m, &par, &c, &g, Phase::Forward);
        assert_eq!(
            inner_ring_time(&m, &par, &c, &g, Phase::Forward),
            comp.max(outer)
        );
    }

    #[test]
    fn compute_bound_ring_is_w_steps() {
        let c = ClusterConfig::default().with_alpha(1.0);
        let m = ModelConfig::mha(1024, 8, 64);
        let par = ParallelConfig::new(2, 8, 4, Placement::ContextFirst);
        let g = grid(&par, &c);
        let comp = comp_time(&m, &par, &c, Phase::Backward);
        let t = inner_ring_time(&m, &par, &c, &g, Phase::Backward);
        assert!((t - 4.0 * comp).abs() < 1e-9 * t);
    }

    #[test]
    fn contention_counts_node_flows() {
        let c = ClusterConfig::default();
        let par = |w| ParallelConfig::new(4, 16, w, Placement::ContextFirst);
        for (w, expect) in [(1, 1.0), (2, 1.0), (4, 1.0), (8, 2.0)] {
            let g = grid(&par(w), &c);
            assert_eq!(hop_contention(&g, &c, HopKind::Outer), expect, "w={w}");
        }
    }

    #[test]
    fn objective_without_head_parallelism_is_ring_only() {
        let c = ClusterConfig::default();
        let m = ModelConfig::mha(K128, 32, 4096);
        let par = ParallelConfig::new(1, 64, 4, Placement::HeadFirst);
        let r = objective(&m, &par, &c, &grid(&par, &c));
        assert_eq!(r.t_seqalltoall, 0.0);
        assert_eq!(
            r.objective,
            (r.t_inner_ring_fwd + r.t_inner_ring_bwd) * 16.0
        );
    }

    #[test]
    fn objective_compute_limit() {
        let c = ClusterConfig::default().with_alpha(1e-6);
        let m = ModelConfig::mha(4096, 32, 512);
        let par = ParallelConfig::new(4, 8, 2, Placement::HeadFirst);
        let r = objective(&m, &par, &c, &grid(&par, &c));
        let expect = r.t_seqalltoall + r.total_compute;
        assert!((r.objective - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn memory_modes() {
        let m = ModelConfig::llama7b(K128, 32);
        let par = ParallelConfig::new(8, 8, 4, Placement::HeadFirst);
        let sd = (K128 * 4096) as f64;
        let sh = (K128 * 32) as f64;
        let full = memory_estimate(&m, &par, CheckpointMode::Full, 64).unwrap();
        assert_eq!(full.activation_per_layer, 2.0 * sd / 64.0);
        assert_eq!(full.scpp_extra_per_layer, 0.0);
        let scpp = memory_estimate(&m, &par, CheckpointMode::SelectivePlusPlus, 64).unwrap();
        assert_eq!(scpp.scpp_extra_per_layer, (2.0 * sd + 4.0 * sh) / 64.0);
        let none = memory_estimate(&m, &par, CheckpointMode::None, 64).unwrap();
        assert_eq!(none.activation_per_layer, (6.0 * sd + 4.0 * sh) / 64.0);
        assert_eq!(full.kv_buffers, 2.0 * size_kv(&m, &par));
        let single = ParallelConfig::new(8, 8, 8, Placement::HeadFirst);
        let one = memory_estimate(&m, &single, CheckpointMode::Full, 64).unwrap();
        assert_eq!(one.kv_buffers, size_kv(&m, &single));
        assert_eq!(full.model_states, m.model_state_bytes() / 64.0);
        assert!(memory_estimate(&m, &par, CheckpointMode::Full, 65).is_err());
        assert!(memory_estimate(&m, &par, CheckpointMode::Full, 0).is_err());
    }

    #[test]
    fn scalability_limits() {
        let m = ModelConfig::llama7b(1 << 20, 32).with_global_batch(4 << 20);
        let u = scalability(&m, SpMode::Ulysses);
        assert_eq!(u.max_gpus, Some(128));
        let m2 = ModelConfig::llama7b(K128, 32).with_global_batch(4 << 20);
        assert_eq!(scalability(&m2, SpMode::Ulysses).max_gpus, Some(1024));
        let t = scalability(&m, SpMode::TwoD);
        assert_eq!(t.max_d_sp, None);
        assert_eq!(t.max_gpus, None);
        assert_eq!(t.max_d_dp, 4);
    }

    #[test]
    fn bubble_rate_grows_as_micro_batches_shrink() {
        let m = ModelConfig::llama7b(1 << 20, 32).with_global_batch(4 << 20);
        assert_eq!(bubble_rate(&m, 1, 4), 0.75);
        assert_eq!(bubble_rate(&m, 4, 4), 3.0);
        assert!(bubble_rate(&m, 8, 4).is_infinite());
    }
}

//! Model, parallelism and cluster configuration, plus the rank grid.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer shape. `global_batch` is counted in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub global_batch: usize,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: usize,
    #[serde(default = "default_lse_bytes")]
    pub lse_bytes: usize,
    /// Total parameter + gradient + optimizer bytes. When absent it is
    /// estimated as 16 bytes per parameter with `12 * layers * hidden^2`
    /// parameters (mixed-precision Adam).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_state_bytes: Option<f64>,
}

fn default_layers() -> usize {
    1
}
fn default_elem_bytes() -> usize {
    2
}
fn default_lse_bytes() -> usize {
    4
}

impl ModelConfig {
    /// Multi-head attention shape with FP16 elements and a single layer.
    pub fn mha(seq_len: usize, heads: usize, hidden: usize) -> Self {
        Self::gqa(seq_len, heads, heads, hidden)
    }

    pub fn gqa(seq_len: usize, heads: usize, kv_heads: usize, hidden: usize) -> Self {
        Self {
            seq_len,
            heads,
            kv_heads,
            hidden,
            layers: 1,
            global_batch: seq_len,
            elem_bytes: 2,
            lse_bytes: 4,
            model_state_bytes: None,
        }
    }

    /// The 7B-class shape: 32 layers, D = 4096, H = 32.
    pub fn llama7b(seq_len: usize, kv_heads: usize) -> Self {
        Self {
            layers: 32,
            ..Self::gqa(seq_len, 32, kv_heads, 4096)
        }
    }

    pub fn with_global_batch(mut self, tokens: usize) -> Self {
        self.global_batch = tokens;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Query heads per KV head.
    pub fn groups(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn model_state_bytes(&self) -> f64 {
        self.model_state_bytes.unwrap_or_else(|| {
            let params = 12.0 * self.layers as f64 * (self.hidden as f64).powi(2);
            16.0 * params
        })
    }
}

/// Which parallel group gets packed onto a node first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    HeadFirst,
    ContextFirst,
}

impl Placement {
    pub const ALL: [Placement; 2] = [Placement::HeadFirst, Placement::ContextFirst];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::HeadFirst => "head_first",
            Placement::ContextFirst => "context_first",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    #[serde(default = "one")]
    pub d_dp: usize,
    pub d_hp: usize,
    pub d_cp: usize,
    /// Inner ring size `w`.
    pub inner_ring: usize,
    pub placement: Placement,
}

fn one() -> usize {
    1
}

impl ParallelConfig {
    pub fn new(d_hp: usize, d_cp: usize, inner_ring: usize, placement: Placement) -> Self {
        Self {
            d_dp: 1,
            d_hp,
            d_cp,
            inner_ring,
            placement,
        }
    }

    /// Classic single ring (`w = d_cp`), head-first.
    pub fn single_ring(d_hp: usize, d_cp: usize) -> Self {
        Self::new(d_hp, d_cp, d_cp, Placement::HeadFirst)
    }

    pub fn d_sp(&self) -> usize {
        self.d_hp * self.d_cp
    }

    /// Number of inner rings in a CP group, i.e. outer ring steps.
    pub fn outer_steps(&self) -> usize {
        self.d_cp / self.inner_ring
    }
}

/// Node topology and rate constants. Bandwidths are unidirectional bytes/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub gpus_per_node: usize,
    pub nics_per_node: usize,
    pub nic_bw: f64,
    pub nvlink_bw: f64,
    pub p2p_latency_intra: f64,
    pub p2p_latency_inter: f64,
    pub alltoall_latency: f64,
    /// Dense half-precision peak of one GPU, FLOP/s.
    pub peak_flops: f64,
    /// Fraction of `peak_flops` the attention kernel sustains.
    pub flops_efficiency: f64,
    /// Seconds per `S^2 * D` unit of forward attention work. Overrides the
    /// value derived from `peak_flops`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_fwd: Option<f64>,
    /// Per-GPU memory capacity in bytes, used only as a planner filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_memory_bytes: Option<f64>,
}

impl Default for ClusterConfig {
    /// 8 GPUs and 4 x 200 Gb/s NICs per node, NVLINK at 300 GB/s each way,
    /// 312 TFLOP/s peak at 50% attention efficiency.
    fn default() -> Self {
        Self {
            gpus_per_node: 8,
            nics_per_node: 4,
            nic_bw: 25e9,
            nvlink_bw: 300e9,
            p2p_latency_intra: 10e-6,
            p2p_latency_inter: 20e-6,
            alltoall_latency: 30e-6,
            peak_flops: 312e12,
            flops_efficiency: 0.5,
            alpha_fwd: None,
            gpu_memory_bytes: Some(80e9),
        }
    }
}

impl ClusterConfig {
    /// Forward attention costs `2 * S^2 * D` FLOPs with the causal half
    /// already taken out, so `alpha = 2 / sustained_flops`.
    pub fn alpha(&self) -> f64 {
        self.alpha_fwd
            .unwrap_or(2.0 / (self.peak_flops * self.flops_efficiency))
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_fwd = Some(alpha);
        self
    }
}

/// One broken rule found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule")]
pub enum Violation {
    ZeroDegree { name: &'static str },
    EmptySequence,
    BatchBelowSequence { global_batch: usize, seq_len: usize },
    KvHeadsNotDividingHeads { heads: usize, kv_heads: usize },
    HeadsNotDividingHidden { hidden: usize, heads: usize },
    HeadParallelAboveHeads { d_hp: usize, heads: usize },
    HeadParallelNotDividingHeads { d_hp: usize, heads: usize },
    InnerRingOutOfRange { inner_ring: usize, d_cp: usize },
    InnerRingNotDividingCp { inner_ring: usize, d_cp: usize },
    SequenceNotBalanced { seq_len: usize, d_sp: usize },
    NonPositiveClusterField { field: &'static str },
}

impl Violation {
    /// The rule this violation breaks, in short symbolic form.
    pub fn rule(&self) -> &'static str {
        match self {
            Violation::ZeroDegree { .. } => "parallel degrees >= 1",
            Violation::EmptySequence => "S >= 1",
            Violation::BatchBelowSequence { .. } => "B >= S",
            Violation::KvHeadsNotDividingHeads { .. } => "H mod H_kv = 0",
            Violation::HeadsNotDividingHidden { .. } => "D mod H = 0",
            Violation::HeadParallelAboveHeads { .. } => "d_hp <= H",
            Violation::HeadParallelNotDividingHeads { .. } => "d_hp divides H",
            Violation::InnerRingOutOfRange { .. } => "1 <= w <= d_cp",
            Violation::InnerRingNotDividingCp { .. } => "w divides d_cp",
            Violation::SequenceNotBalanced { .. } => "S mod (2 * d_sp) = 0",
            Violation::NonPositiveClusterField { .. } => "cluster rates > 0",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDegree { name } => write!(f, "{}: {name} = 0", self.rule()),
            Violation::EmptySequence => f.write_str(self.rule()),
            Violation::BatchBelowSequence {
                global_batch,
                seq_len,
            } => write!(f, "{}: B = {global_batch}, S = {seq_len}", self.rule()),
            Violation::KvHeadsNotDividingHeads { heads, kv_heads } => {
                write!(f, "{}: H = {heads}, H_kv = {kv_heads}", self.rule())
            }
            Violation::HeadsNotDividingHidden { hidden, heads } => {
                write!(f, "{}: D = {hidden}, H = {heads}", self.rule())
            }
            Violation::HeadParallelAboveHeads { d_hp, heads }
            | Violation::HeadParallelNotDividingHeads { d_hp, heads } => {
                write!(f, "{}: d_hp = {d_hp}, H = {heads}", self.rule())
            }
            Violation::InnerRingOutOfRange { inner_ring, d_cp }
            | Violation::InnerRingNotDividingCp { inner_ring, d_cp } => {
                write!(f, "{}: w = {inner_ring}, d_cp = {d_cp}", self.rule())
            }
            Violation::SequenceNotBalanced { seq_len, d_sp } => {
                write!(f, "{}: S = {seq_len}, d_sp = {d_sp}", self.rule())
            }
            Violation::NonPositiveClusterField { field } => {
                write!(f, "{}: {field}", self.rule())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule() == rule)
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(self.violations))
        }
    }
}

/// Checks every cross-config invariant and lists what is broken.
pub fn validate(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
) -> ValidationReport {
    let mut v = Vec::new();
    check_model(model, &mut v);
    check_parallel(par, &mut v);
    check_cluster(cluster, &mut v);

    if par.d_hp > 0 && model.heads > 0 {
        if par.d_hp > model.heads {
            v.push(Violation::HeadParallelAboveHeads {
                d_hp: par.d_hp,
                heads: model.heads,
            });
        } else if !model.heads.is_multiple_of(par.d_hp) {
            v.push(Violation::HeadParallelNotDividingHeads {
                d_hp: par.d_hp,
                heads: model.heads,
            });
        }
    }
    let d_sp = par.d_sp();
    if d_sp > 0 && model.seq_len > 0 && !model.seq_len.is_multiple_of(2 * d_sp) {
        v.push(Violation::SequenceNotBalanced {
            seq_len: model.seq_len,
            d_sp,
        });
    }
    ValidationReport { violations: v }
}

fn check_model(model: &ModelConfig, v: &mut Vec<Violation>) {
    if model.seq_len == 0 {
        v.push(Violation::EmptySequence);
    }
    if model.global_batch < model.seq_len {
        v.push(Violation::BatchBelowSequence {
            global_batch: model.global_batch,
            seq_len: model.seq_len,
        });
    }
    if model.heads == 0 || model.kv_heads == 0 || !model.heads.is_multiple_of(model.kv_heads) {
        v.push(Violation::KvHeadsNotDividingHeads {
            heads: model.heads,
            kv_heads: model.kv_heads,
        });
    }
    if model.heads == 0 || !model.hidden.is_multiple_of(model.heads) || model.hidden == 0 {
        v.push(Violation::HeadsNotDividingHidden {
            hidden: model.hidden,
            heads: model.heads,
        });
    }
}

fn check_parallel(par: &ParallelConfig, v: &mut Vec<Violation>) {
    for (name, value) in [("d_dp", par.d_dp), ("d_hp", par.d_hp), ("d_cp", par.d_cp)] {
        if value == 0 {
            v.push(Violation::ZeroDegree { name });
        }
    }
    if par.inner_ring == 0 || par.inner_ring > par.d_cp {
        v.push(Violation::InnerRingOutOfRange {
            inner_ring: par.inner_ring,
            d_cp: par.d_cp,
        });
    } else if !par.d_cp.is_multiple_of(par.inner_ring) {
        v.push(Violation::InnerRingNotDividingCp {
            inner_ring: par.inner_ring,
            d_cp: par.d_cp,
        });
    }
}

fn check_cluster(c: &ClusterConfig, v: &mut Vec<Violation>) {
    let positive = [
        ("gpus_per_node", c.gpus_per_node as f64),
        ("nics_per_node", c.nics_per_node as f64),
        ("nic_bw", c.nic_bw),
        ("nvlink_bw", c.nvlink_bw),
        ("p2p_latency_intra", c.p2p_latency_intra),
        ("p2p_latency_inter", c.p2p_latency_inter),
        ("alltoall_latency", c.alltoall_latency),
        ("alpha", c.alpha()),
    ];
    for (field, value) in positive {
        if value.is_nan() || value <= 0.0 {
            v.push(Violation::NonPositiveClusterField { field });
        }
    }
}

/// Logical position of a rank: head-parallel index `hp` in `[0, d_hp)` and
/// context-parallel index `cp` in `[0, d_cp)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GridCoord {
    pub hp: usize,
    pub cp: usize,
}

/// Bijection between ranks `0..d_sp` and grid coordinates, with node
/// assignment derived from `gpus_per_node`.
///
/// Ranks sharing `cp` form an HP group (size `d_hp`); ranks sharing `hp` form
/// a CP group (size `d_cp`). Head-first numbers ranks hp-major
/// (`rank = cp * d_hp + hp`) so HP groups are node-contiguous; context-first
/// numbers them cp-major (`rank = hp * d_cp + cp`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankGrid {
    d_hp: usize,
    d_cp: usize,
    inner_ring: usize,
    placement: Placement,
    gpus_per_node: usize,
    coords: Vec<GridCoord>,
    ranks: Vec<usize>,
}

pub fn build_rank_grid(par: &ParallelConfig, cluster: &ClusterConfig) -> Result<RankGrid> {
    let mut v = Vec::new();
    check_parallel(par, &mut v);
    if cluster.gpus_per_node == 0 {
        v.push(Violation::NonPositiveClusterField {
            field: "gpus_per_node",
        });
    }
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v));
    }

    let d_sp = par.d_sp();
    let mut coords = Vec::with_capacity(d_sp);
    let mut ranks = vec![0; d_sp];
    for rank in 0..d_sp {
        let c = match par.placement {
            Placement::HeadFirst => GridCoord {
                hp: rank % par.d_hp,
                cp: rank / par.d_hp,
            },
            Placement::ContextFirst => GridCoord {
                hp: rank / par.d_cp,
                cp: rank % par.d_cp,
            },
        };
        ranks[c.hp * par.d_cp + c.cp] = rank;
        coords.push(c);
    }
    Ok(RankGrid {
        d_hp: par.d_hp,
        d_cp: par.d_cp,
        inner_ring: par.inner_ring,
        placement: par.placement,
        gpus_per_node: cluster.gpus_per_node,
        coords,
        ranks,
    })
}

impl RankGrid {
    pub fn d_hp(&self) -> usize {
        self.d_hp
    }
    pub fn d_cp(&self) -> usize {
        self.d_cp
    }
    pub fn d_sp(&self) -> usize {
        self.d_hp * self.d_cp
    }
    pub fn inner_ring(&self) -> usize {
        self.inner_ring
    }
    pub fn outer_steps(&self) -> usize {
        self.d_cp / self.inner_ring
    }
    pub fn placement(&self) -> Placement {
        self.placement
    }
    pub fn gpus_per_node(&self) -> usize {
        self.gpus_per_node
    }

    pub fn coord(&self, rank: usize) -> GridCoord {
        self.coords[rank]
    }

    pub fn rank_of(&self, hp: usize, cp: usize) -> usize {
        self.ranks[hp * self.d_cp + cp]
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.gpus_per_node
    }

    pub fn num_nodes(&self) -> usize {
        self.d_sp().div_ceil(self.gpus_per_node)
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    /// `(inner ring index, position within the ring)` of CP index `cp`.
    pub fn inner_ring_coord(&self, cp: usize) -> (usize, usize) {
        (cp / self.inner_ring, cp % self.inner_ring)
    }

    /// CP index at inner ring `ring`, position `pos`.
    pub fn cp_at(&self, ring: usize, pos: usize) -> usize {
        ring * self.inner_ring + pos
    }

    /// CP index receiving the inner-ring send of `cp`.
    pub fn inner_next(&self, cp: usize) -> usize {
        let (r, p) = self.inner_ring_coord(cp);
        self.cp_at(r, (p + 1) % self.inner_ring)
    }

    /// CP index receiving the outer-ring send of `cp`.
    pub fn outer_next(&self, cp: usize) -> usize {
        let (r, p) = self.inner_ring_coord(cp);
        self.cp_at((r + 1) % self.outer_steps(), p)
    }

    /// Ranks of CP group `hp`, ordered by CP index.
    pub fn cp_group(&self, hp: usize) -> Vec<usize> {
        (0..self.d_cp).map(|cp| self.rank_of(hp, cp)).collect()
    }

    /// Ranks of HP group `cp`, ordered by HP index.
    pub fn hp_group(&self, cp: usize) -> Vec<usize> {
        (0..self.d_hp).map(|hp| self.rank_of(hp, cp)).collect()
    }
}

/// On-disk configuration: `{"model": .., "parallel": .., "cluster": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub parallel: ParallelConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(&self.model, &self.parallel, &self.cluster)
    }

    pub fn grid(&self) -> Result<RankGrid> {
        build_rank_grid(&self.parallel, &self.cluster)
    }
}

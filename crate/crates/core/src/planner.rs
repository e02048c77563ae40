//! Search over `(d_hp, d_cp, w, placement)` for a fixed `d_sp`.
//!
//! Each candidate is scored on one attention layer, forward plus backward.
//! Ranking is ascending by the chosen key, then smaller `d_hp`, smaller `w`,
//! head-first before context-first. The tie rule is a convention, nothing in
//! the model prefers one equal-cost configuration over another.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    build_rank_grid, validate, ClusterConfig, ModelConfig, ParallelConfig, Placement,
};
use crate::cost::{memory_estimate, objective, CheckpointMode, CostReport, MemoryReport};
use crate::error::{Error, Result};
use crate::sim::simulate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    Objective,
    SimMakespan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEntry {
    pub par: ParallelConfig,
    pub cost: CostReport,
    pub makespan: Option<f64>,
    pub memory: MemoryReport,
    /// False only when a per-GPU capacity is set and exceeded.
    pub fits_memory: bool,
    pub within_head_bound: bool,
}

impl PlanEntry {
    /// Value of `key`; a missing simulation falls back to the objective.
    pub fn score(&self, key: RankKey) -> f64 {
        match key {
            RankKey::Objective => self.cost.objective,
            RankKey::SimMakespan => self.makespan.unwrap_or(self.cost.objective),
        }
    }
}

fn divisors(n: usize) -> impl Iterator<Item = usize> {
    (1..=n).filter(move |d| n.is_multiple_of(*d))
}

/// Every valid configuration, one per `(d_hp, d_cp, w, placement)` tuple.
pub fn enumerate_all(
    model: &ModelConfig,
    d_sp: usize,
    cluster: &ClusterConfig,
) -> Vec<ParallelConfig> {
    let mut out = Vec::new();
    for d_hp in divisors(d_sp) {
        let d_cp = d_sp / d_hp;
        for w in divisors(d_cp) {
            for placement in Placement::ALL {
                let par = ParallelConfig::new(d_hp, d_cp, w, placement);
                if validate(model, &par, cluster).is_valid() {
                    out.push(par);
                }
            }
        }
    }
    out
}

/// Valid configurations with placement duplicates removed: when `d_hp = 1`
/// or `d_cp = 1` both placements give the same rank layout, and only the
/// head-first one is kept.
pub fn enumerate_configs(
    model: &ModelConfig,
    d_sp: usize,
    cluster: &ClusterConfig,
) -> Vec<ParallelConfig> {
    let mut seen = BTreeSet::new();
    enumerate_all(model, d_sp, cluster)
        .into_iter()
        .filter(|par| {
            let grid = build_rank_grid(par, cluster).expect("validated");
            let layout: Vec<usize> = (0..par.d_hp)
                .flat_map(|hp| (0..par.d_cp).map(move |cp| (hp, cp)))
                .map(|(hp, cp)| grid.rank_of(hp, cp))
                .collect();
            seen.insert((par.d_hp, par.inner_ring, layout))
        })
        .collect()
}

/// Scores one configuration. `simulate_it` also runs the timeline simulator.
pub fn score(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    simulate_it: bool,
) -> Result<PlanEntry> {
    validate(model, par, cluster).into_result()?;
    let grid = build_rank_grid(par, cluster)?;
    let cost = objective(model, par, cluster, &grid);
    let makespan = if simulate_it {
        Some(simulate(model, par, cluster, &grid)?.makespan())
    } else {
        None
    };
    let memory = memory_estimate(model, par, CheckpointMode::Full, par.d_dp * par.d_sp())?;
    let fits_memory = cluster
        .gpu_memory_bytes
        .is_none_or(|cap| memory.total <= cap);
    Ok(PlanEntry {
        par: *par,
        cost,
        makespan,
        memory,
        fits_memory,
        within_head_bound: par.d_hp <= model.heads,
    })
}

/// Sorts entries by `key` with the documented tie rule.
pub fn rank(mut entries: Vec<PlanEntry>, key: RankKey) -> Result<Vec<PlanEntry>> {
    if entries.is_empty() {
        return Err(Error::Invalid("nothing to rank".into()));
    }
    entries.sort_by(|a, b| {
        a.score(key)
            .total_cmp(&b.score(key))
            .then(a.par.d_hp.cmp(&b.par.d_hp))
            .then(a.par.inner_ring.cmp(&b.par.inner_ring))
            .then(a.par.placement.cmp(&b.par.placement))
            .then(a.par.d_cp.cmp(&b.par.d_cp))
    });
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanOptions {
    pub key: RankKey,
    /// Drop configurations that exceed the per-GPU memory capacity.
    pub memory_filter: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            key: RankKey::Objective,
            memory_filter: false,
        }
    }
}

/// Enumerates, scores in parallel and ranks.
pub fn plan(
    model: &ModelConfig,
    d_sp: usize,
    cluster: &ClusterConfig,
    opts: PlanOptions,
) -> Result<Vec<PlanEntry>> {
    let simulate_it = opts.key == RankKey::SimMakespan;
    let entries = enumerate_configs(model, d_sp, cluster)
        .par_iter()
        .map(|par| score(model, par, cluster, simulate_it))
        .collect::<Result<Vec<_>>>()?;
    let entries = entries
        .into_iter()
        .filter(|e| !opts.memory_filter || e.fits_memory)
        .collect();
    rank(entries, opts.key)
}

/// One line of a plan table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub d_hp: usize,
    pub d_cp: usize,
    pub w: usize,
    pub placement: Placement,
    pub objective_ms: f64,
    pub makespan_ms: Option<f64>,
    #[serde(rename = "mem_GB")]
    pub mem_gb: f64,
    pub rank: usize,
}

/// Table rows for already-ranked entries.
pub fn plan_rows(ranked: &[PlanEntry]) -> Vec<PlanRow> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, e)| PlanRow {
            d_hp: e.par.d_hp,
            d_cp: e.par.d_cp,
            w: e.par.inner_ring,
            placement: e.par.placement,
            objective_ms: e.cost.objective * 1e3,
            makespan_ms: e.makespan.map(|m| m * 1e3),
            mem_gb: e.memory.total / 1e9,
            rank: i + 1,
        })
        .collect()
}

pub fn write_csv<W: Write>(ranked: &[PlanEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in plan_rows(ranked) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(ranked: &[PlanEntry]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&plan_rows(ranked))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_enumeration() {
        let m = ModelConfig::mha(4096, 32, 4096);
        let c = ClusterConfig::default();
        assert_eq!(
            enumerate_configs(&m, 1, &c),
            vec![ParallelConfig::single_ring(1, 1)]
        );
    }

    #[test]
    fn head_bound_respected() {
        let m = ModelConfig::mha(128 * 1024, 32, 4096);
        let c = ClusterConfig::default();
        let hps: BTreeSet<usize> = enumerate_configs(&m, 64, &c)
            .iter()
            .map(|p| p.d_hp)
            .collect();
        assert_eq!(hps, [1, 2, 4, 8, 16, 32].into_iter().collect());
    }

    #[test]
    fn raw_and_deduplicated_counts() {
        let m = ModelConfig::mha(128 * 1024, 32, 4096);
        let c = ClusterConfig::default();
        // 4 factorizations, sum of divisors of d_cp = 4 + 3 + 2 + 1, 2 placements
        assert_eq!(enumerate_all(&m, 8, &c).len(), 20);
        // d_hp = 1 (4 values of w) and d_cp = 1 (1 value) collapse
        assert_eq!(enumerate_configs(&m, 8, &c).len(), 15);
    }

    #[test]
    fn empty_rank_is_error() {
        assert!(rank(Vec::new(), RankKey::Objective).is_err());
    }

    #[test]
    fn csv_header() {
        let m = ModelConfig::mha(8192, 8, 1024);
        let c = ClusterConfig::default();
        let ranked = plan(&m, 4, &c, PlanOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ranked, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("d_hp,d_cp,w,placement,objective_ms,makespan_ms,mem_GB,rank\n"));
        assert_eq!(text.lines().count(), ranked.len() + 1);
    }
}

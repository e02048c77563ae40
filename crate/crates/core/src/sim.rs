//! Discrete-event simulation of one attention layer (forward + backward).
//!
//! Resources: one compute slot per rank, and per rank an egress and an
//! ingress port for each link class. A transfer holds the sender's egress
//! port and the receiver's ingress port for its whole duration. Durations
//! come from the cost model, so contention is the same static NIC sharing
//! factor.
//!
//! Dependencies follow the double-ring loop: the compute and the inner send
//! of micro-step `t + 1` wait for the compute and the inner receive of
//! micro-step `t`; the first micro-step of an outer step also waits for the
//! outer receive. The outer send is issued with the first micro-step and
//! overlaps the whole inner ring, except that when it shares an egress port
//! with the inner sends it is queued behind them.
//!
//! Tasks start in order of readiness, ties broken by `(rank, phase, outer
//! step, inner step, kind)`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ClusterConfig, ModelConfig, ParallelConfig, RankGrid};
use crate::cost::{
    alltoall_split, alltoall_time, comp_time, hop_target, hop_time, link_class, size_kv, HopKind,
    LinkClass, Phase, BACKWARD_P2P_FACTOR,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Resource {
    Compute(usize),
    Egress(usize, LinkClass),
    Ingress(usize, LinkClass),
    AllToAll(usize),
    Sync(usize),
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Compute(r) => write!(f, "r{r}.compute"),
            Resource::Egress(r, c) => write!(f, "r{r}.tx.{}", c.name()),
            Resource::Ingress(r, c) => write!(f, "r{r}.rx.{}", c.name()),
            Resource::AllToAll(r) => write!(f, "r{r}.alltoall"),
            Resource::Sync(r) => write!(f, "r{r}.sync"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EventKind {
    Compute,
    P2PSend,
    P2PRecv,
    AllToAll,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Collective {
    Scatter,
    Gather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Tag {
    pub phase: Phase,
    pub outer: usize,
    pub inner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub rank: usize,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
    pub resource: Resource,
    pub tag: Tag,
    /// Other end of a P2P transfer.
    pub peer: Option<usize>,
    pub hop: Option<HopKind>,
    pub collective: Option<Collective>,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn name(&self) -> String {
        let Tag {
            phase,
            outer,
            inner,
        } = self.tag;
        let p = phase.name();
        match self.kind {
            EventKind::Compute => format!("attn {p} o{outer} t{inner}"),
            EventKind::P2PSend | EventKind::P2PRecv => {
                let dir = if self.kind == EventKind::P2PSend {
                    "send"
                } else {
                    "recv"
                };
                let hop = match self.hop {
                    Some(HopKind::Outer) => "outer",
                    _ => "inner",
                };
                format!(
                    "{dir} {hop} {p} o{outer} t{inner} peer r{}",
                    self.peer.unwrap_or(self.rank)
                )
            }
            EventKind::AllToAll => match self.collective {
                Some(Collective::Gather) => format!("alltoall {p} gather"),
                _ => format!("alltoall {p} scatter"),
            },
            EventKind::Sync => format!("wait {p} o{outer} t{inner}"),
        }
    }
}

/// Simulated events plus derived totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub d_sp: usize,
    pub gpus_per_node: usize,
}

/// `{makespan, exposed_comm, per_link_busy}` in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub makespan: f64,
    pub exposed_comm: f64,
    pub total_compute: f64,
    pub per_link_busy: BTreeMap<String, f64>,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    /// Compute busy time of `rank`.
    pub fn compute_time(&self, rank: usize) -> f64 {
        self.events
            .iter()
            .filter(|e| e.rank == rank && e.kind == EventKind::Compute)
            .map(Event::duration)
            .sum()
    }

    /// Largest compute busy time over ranks.
    pub fn total_compute(&self) -> f64 {
        (0..self.d_sp)
            .map(|r| self.compute_time(r))
            .fold(0.0, f64::max)
    }

    /// `makespan - compute time` for each rank.
    pub fn exposed_comm_per_rank(&self) -> Vec<f64> {
        let m = self.makespan();
        (0..self.d_sp).map(|r| m - self.compute_time(r)).collect()
    }

    /// Worst rank's exposed communication.
    pub fn exposed_comm(&self) -> f64 {
        self.exposed_comm_per_rank().into_iter().fold(0.0, f64::max)
    }

    pub fn busy_by_resource(&self) -> BTreeMap<Resource, f64> {
        let mut busy = BTreeMap::new();
        for e in &self.events {
            if e.kind == EventKind::Sync {
                continue;
            }
            *busy.entry(e.resource).or_insert(0.0) += e.duration();
        }
        busy
    }

    /// Busy fraction of the makespan per resource.
    pub fn utilization(&self) -> BTreeMap<Resource, f64> {
        let m = self.makespan();
        self.busy_by_resource()
            .into_iter()
            .map(|(r, b)| (r, if m > 0.0 { b / m } else { 0.0 }))
            .collect()
    }

    /// `max(compute of any rank, busiest resource)`.
    pub fn lower_bound(&self) -> f64 {
        self.busy_by_resource()
            .values()
            .copied()
            .fold(self.total_compute(), f64::max)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            makespan: self.makespan(),
            exposed_comm: self.exposed_comm(),
            total_compute: self.total_compute(),
            per_link_busy: self
                .busy_by_resource()
                .into_iter()
                .filter(|(r, _)| !matches!(r, Resource::Compute(_)))
                .map(|(r, b)| (r.to_string(), b))
                .collect(),
        }
    }

    fn computes(&self, rank: usize, phase: Phase) -> impl Iterator<Item = &Event> {
        self.events
            .iter()
            .filter(move |e| e.rank == rank && e.kind == EventKind::Compute && e.tag.phase == phase)
    }

    /// Wall time of each inner ring of `rank` in `phase`: from its first
    /// micro-step's start to the next ring's first start (the last ring ends
    /// at its last compute).
    pub fn inner_ring_spans(&self, rank: usize, phase: Phase) -> Vec<f64> {
        let mut starts = BTreeMap::new();
        let mut last_end: f64 = 0.0;
        for e in self.computes(rank, phase) {
            if e.tag.inner == 0 {
                starts.insert(e.tag.outer, e.start);
            }
            last_end = last_end.max(e.end);
        }
        let starts: Vec<f64> = starts.into_values().collect();
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| starts.get(i + 1).copied().unwrap_or(last_end) - s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}
impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

type Emit = (usize, EventKind, Resource, Option<usize>);

struct Task {
    rank: usize,
    tag: Tag,
    kind_order: u8,
    duration: f64,
    resources: Vec<Resource>,
    deps: Vec<usize>,
    emits: Vec<Emit>,
    hop: Option<HopKind>,
    collective: Option<Collective>,
}

#[derive(Default)]
struct Graph {
    tasks: Vec<Task>,
}

impl Graph {
    fn add(&mut self, task: Task) -> usize {
        self.tasks.push(task);
        self.tasks.len() - 1
    }

    /// List scheduling: ready tasks start in readiness order on the earliest
    /// slot all their resources share.
    fn run(&self) -> Vec<Event> {
        let n = self.tasks.len();
        let mut dependents = vec![Vec::new(); n];
        let mut pending = vec![0usize; n];
        for (id, t) in self.tasks.iter().enumerate() {
            pending[id] = t.deps.len();
            for &d in &t.deps {
                dependents[d].push(id);
            }
        }
        let mut ready_at = vec![0.0f64; n];
        let mut heap = BinaryHeap::new();
        let key = |id: usize, ready: f64, t: &Task| {
            Reverse((Time(ready), t.rank, t.tag, t.kind_order, id))
        };
        for (id, t) in self.tasks.iter().enumerate() {
            if pending[id] == 0 {
                heap.push(key(id, 0.0, t));
            }
        }
        let mut free: BTreeMap<Resource, f64> = BTreeMap::new();
        let mut events = Vec::new();
        while let Some(Reverse((Time(ready), _, _, _, id))) = heap.pop() {
            let t = &self.tasks[id];
            let start = t
                .resources
                .iter()
                .map(|r| free.get(r).copied().unwrap_or(0.0))
                .fold(ready, f64::max);
            let end = start + t.duration;
            for r in &t.resources {
                free.insert(*r, end);
            }
            for &(rank, kind, resource, peer) in &t.emits {
                events.push(Event {
                    rank,
                    kind,
                    start,
                    end,
                    resource,
                    tag: t.tag,
                    peer,
                    hop: t.hop,
                    collective: t.collective,
                });
            }
            for &d in &dependents[id] {
                ready_at[d] = ready_at[d].max(end);
                pending[d] -= 1;
                if pending[d] == 0 {
                    heap.push(key(d, ready_at[d], &self.tasks[d]));
                }
            }
        }
        events
    }
}

/// Simulates forward then backward of one attention layer.
pub fn simulate(
    model: &ModelConfig,
    par: &ParallelConfig,
    cluster: &ClusterConfig,
    grid: &RankGrid,
) -> Result<Timeline> {
    if (grid.d_hp(), grid.d_cp(), grid.inner_ring()) != (par.d_hp, par.d_cp, par.inner_ring) {
        return Err(Error::Invalid(
            "rank grid was built for another config".into(),
        ));
    }
    let d_sp = grid.d_sp();
    let w = par.inner_ring;
    let rings = par.outer_steps();
    let mut g = Graph::default();
    let mut last: Vec<Option<usize>> = vec![None; d_sp];

    for phase in Phase::BOTH {
        let comp = comp_time(model, par, cluster, phase);
        let bytes = match phase {
            Phase::Forward => size_kv(model, par),
            Phase::Backward => BACKWARD_P2P_FACTOR * size_kv(model, par),
        };
        let (qkv_vol, out_vol) = alltoall_split(model, par);
        // forward scatters QKV and gathers O; backward scatters dO and
        // gathers dQKV
        let (scatter_vol, gather_vol) = match phase {
            Phase::Forward => (qkv_vol, out_vol),
            Phase::Backward => (out_vol, qkv_vol),
        };

        if par.d_hp > 1 {
            add_alltoall(
                &mut g,
                grid,
                cluster,
                phase,
                Collective::Scatter,
                scatter_vol,
                &mut last,
            );
        }

        // Task ids are allocated before dependencies are wired because a
        // rank's compute depends on its neighbours' transfers.
        let tag = |o: usize, t: usize| Tag {
            phase,
            outer: o,
            inner: t,
        };
        let mut compute = vec![vec![vec![0usize; w]; rings]; d_sp];
        let mut inner_tx = vec![vec![vec![usize::MAX; w]; rings]; d_sp];
        let mut outer_tx = vec![vec![usize::MAX; rings]; d_sp];
        for rank in 0..d_sp {
            for o in 0..rings {
                for t in 0..w {
                    compute[rank][o][t] = g.add(Task {
                        rank,
                        tag: tag(o, t),
                        kind_order: 1,
                        duration: comp,
                        resources: vec![Resource::Compute(rank)],
                        deps: Vec::new(),
                        emits: vec![(rank, EventKind::Compute, Resource::Compute(rank), None)],
                        hop: None,
                        collective: None,
                    });
                    if t + 1 < w {
                        inner_tx[rank][o][t] = add_transfer(
                            &mut g,
                            grid,
                            cluster,
                            rank,
                            HopKind::Inner,
                            bytes,
                            tag(o, t),
                        );
                    }
                }
                if o + 1 < rings {
                    outer_tx[rank][o] = add_transfer(
                        &mut g,
                        grid,
                        cluster,
                        rank,
                        HopKind::Outer,
                        bytes,
                        tag(o, 0),
                    );
                }
            }
        }

        for rank in 0..d_sp {
            let c = grid.coord(rank);
            let (r, p) = grid.inner_ring_coord(c.cp);
            let inner_pred = grid.rank_of(c.hp, grid.cp_at(r, (p + w - 1) % w));
            let outer_pred = grid.rank_of(c.hp, grid.cp_at((r + rings - 1) % rings, p));
            let same_port = w > 1 && rings > 1 && {
                let i = hop_target(grid, rank, HopKind::Inner).expect("w > 1");
                let o = hop_target(grid, rank, HopKind::Outer).expect("rings > 1");
                link_class(grid, rank, i) == link_class(grid, rank, o)
            };
            let mut prev = last[rank];
            for o in 0..rings {
                for t in 0..w {
                    let mut deps: Vec<usize> = prev.into_iter().collect();
                    if t > 0 {
                        deps.push(inner_tx[inner_pred][o][t - 1]);
                    } else if o > 0 {
                        deps.push(outer_tx[outer_pred][o - 1]);
                    }
                    let id = compute[rank][o][t];
                    if t + 1 < w {
                        g.tasks[inner_tx[rank][o][t]].deps = deps.clone();
                    }
                    if t == 0 && o + 1 < rings {
                        let mut odeps = deps.clone();
                        if same_port {
                            odeps.push(inner_tx[rank][o][w - 2]);
                        }
                        g.tasks[outer_tx[rank][o]].deps = odeps;
                    }
                    g.tasks[id].deps = deps;
                    prev = Some(id);
                }
            }
            last[rank] = prev;
        }

        if par.d_hp > 1 {
            add_alltoall(
                &mut g,
                grid,
                cluster,
                phase,
                Collective::Gather,
                gather_vol,
                &mut last,
            );
        }
    }

    let mut events = g.run();
    events.extend(sync_events(&events, d_sp));
    events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.rank.cmp(&b.rank))
            .then(a.tag.cmp(&b.tag))
            .then(a.kind.cmp(&b.kind))
            .then(a.end.total_cmp(&b.end))
    });
    Ok(Timeline {
        events,
        d_sp,
        gpus_per_node: grid.gpus_per_node(),
    })
}

fn add_transfer(
    g: &mut Graph,
    grid: &RankGrid,
    cluster: &ClusterConfig,
    rank: usize,
    kind: HopKind,
    bytes: f64,
    tag: Tag,
) -> usize {
    let dst = hop_target(grid, rank, kind).expect("transfer only added for real hops");
    let class = link_class(grid, rank, dst);
    let duration = hop_time(grid, cluster, rank, kind, bytes).expect("hop exists");
    g.add(Task {
        rank,
        tag,
        kind_order: match kind {
            HopKind::Inner => 2,
            HopKind::Outer => 3,
        },
        duration,
        resources: vec![Resource::Egress(rank, class), Resource::Ingress(dst, class)],
        deps: Vec::new(),
        emits: vec![
            (
                rank,
                EventKind::P2PSend,
                Resource::Egress(rank, class),
                Some(dst),
            ),
            (
                dst,
                EventKind::P2PRecv,
                Resource::Ingress(dst, class),
                Some(rank),
            ),
        ],
        hop: Some(kind),
        collective: None,
    })
}

fn add_alltoall(
    g: &mut Graph,
    grid: &RankGrid,
    cluster: &ClusterConfig,
    phase: Phase,
    step: Collective,
    volume: f64,
    last: &mut [Option<usize>],
) {
    let duration = alltoall_time(volume, grid, cluster);
    for cp in 0..grid.d_cp() {
        let members = grid.hp_group(cp);
        let id = g.add(Task {
            rank: members[0],
            tag: Tag {
                phase,
                outer: 0,
                inner: 0,
            },
            kind_order: match step {
                Collective::Scatter => 0,
                Collective::Gather => 4,
            },
            duration,
            resources: members.iter().map(|&r| Resource::AllToAll(r)).collect(),
            deps: members.iter().filter_map(|&r| last[r]).collect(),
            emits: members
                .iter()
                .map(|&r| (r, EventKind::AllToAll, Resource::AllToAll(r), None))
                .collect(),
            hop: None,
            collective: Some(step),
        });
        for &r in &members {
            last[r] = Some(id);
        }
    }
}

/// Idle gaps between consecutive micro-steps of a rank: time spent blocked
/// on a receive.
fn sync_events(events: &[Event], d_sp: usize) -> Vec<Event> {
    let mut by_rank: Vec<Vec<&Event>> = vec![Vec::new(); d_sp];
    for e in events.iter().filter(|e| e.kind == EventKind::Compute) {
        by_rank[e.rank].push(e);
    }
    let mut out = Vec::new();
    for (rank, mut cs) in by_rank.into_iter().enumerate() {
        cs.sort_by_key(|a| a.tag);
        for pair in cs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.tag.phase == b.tag.phase && b.start > a.end {
                out.push(Event {
                    rank,
                    kind: EventKind::Sync,
                    start: a.end,
                    end: b.start,
                    resource: Resource::Sync(rank),
                    tag: b.tag,
                    peer: None,
                    hop: None,
                    collective: None,
                });
            }
        }
    }
    out
}

/// One Chrome trace "complete" event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: String,
    pub ph: String,
    /// Microseconds.
    pub ts: f64,
    /// Microseconds.
    pub dur: f64,
    pub pid: usize,
    pub tid: usize,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

pub fn trace_events(t: &Timeline) -> Vec<TraceEvent> {
    t.events
        .iter()
        .map(|e| {
            let mut args = BTreeMap::new();
            args.insert("resource".to_string(), e.resource.to_string());
            args.insert("phase".to_string(), e.tag.phase.name().to_string());
            args.insert("outer".to_string(), e.tag.outer.to_string());
            args.insert("inner".to_string(), e.tag.inner.to_string());
            TraceEvent {
                name: e.name(),
                cat: format!("{:?}", e.kind),
                ph: "X".to_string(),
                ts: e.start * 1e6,
                dur: e.duration() * 1e6,
                pid: e.rank / t.gpus_per_node.max(1),
                tid: e.rank,
                args,
            }
        })
        .collect()
}

/// Chrome Trace Event JSON (array form).
pub fn trace_json(t: &Timeline) -> String {
    serde_json::to_string(&trace_events(t)).expect("trace events serialize")
}

pub fn export_trace(t: &Timeline, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(trace_json(t).as_bytes())?;
    Ok(())
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_rank_grid, Placement};
    use crate::cost::objective;

    fn run(m: &ModelConfig, par: &ParallelConfig, c: &ClusterConfig) -> Timeline {
        simulate(m, par, c, &build_rank_grid(par, c).unwrap()).unwrap()
    }

    #[test]
    fn single_rank_is_two_computes() {
        let c = ClusterConfig::default();
        let m = ModelConfig::mha(4096, 8, 512);
        let par = ParallelConfig::single_ring(1, 1);
        let t = run(&m, &par, &c);
        assert_eq!(t.events.len(), 2);
        assert!(t.events.iter().all(|e| e.kind == EventKind::Compute));
        assert_eq!(t.exposed_comm(), 0.0);
    }

    #[test]
    fn compute_bound_hides_transfers() {
        let c = ClusterConfig::default().with_alpha(1e-3);
        let m = ModelConfig::mha(4096, 8, 512);
        let par = ParallelConfig::new(1, 8, 4, Placement::HeadFirst);
        let t = run(&m, &par, &c);
        let r = objective(&m, &par, &c, &build_rank_grid(&par, &c).unwrap());
        assert!((t.makespan() - r.total_compute).abs() < 1e-9 * r.total_compute);
        assert!(t.exposed_comm() < 1e-9 * r.total_compute);
    }

    #[test]
    fn resources_never_overlap() {
        let c = ClusterConfig::default();
        let m = ModelConfig::gqa(128 * 1024, 32, 8, 4096);
        let par = ParallelConfig::new(4, 16, 4, Placement::HeadFirst);
        let t = run(&m, &par, &c);
        let mut by: BTreeMap<Resource, Vec<(f64, f64)>> = BTreeMap::new();
        for e in &t.events {
            assert!(e.end >= e.start);
            by.entry(e.resource).or_default().push((e.start, e.end));
        }
        for (_, mut v) in by {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            for p in v.windows(2) {
                assert!(p[1].0 >= p[0].1 - 1e-15);
            }
        }
        assert!(t.makespan() >= t.lower_bound() - 1e-12);
    }

    #[test]
    fn deterministic() {
        let c = ClusterConfig::default();
        let m = ModelConfig::mha(128 * 1024, 32, 4096);
        let par = ParallelConfig::new(2, 16, 4, Placement::ContextFirst);
        assert_eq!(run(&m, &par, &c), run(&m, &par, &c));
    }

    #[test]
    fn empty_trace_is_empty_array() {
        let t = Timeline {
            events: Vec::new(),
            d_sp: 1,
            gpus_per_node: 8,
        };
        assert_eq!(trace_json(&t), "[]");
    }

    #[test]
    fn one_event_trace_fields() {
        let c = ClusterConfig::default();
        let m = ModelConfig::mha(4096, 8, 512);
        let mut t = run(&m, &ParallelConfig::single_ring(1, 1), &c);
        t.events.truncate(1);
        let v: serde_json::Value = serde_json::from_str(&trace_json(&t)).unwrap();
        let obj = v.as_array().unwrap()[0].as_object().unwrap();
        for key in ["ph", "ts", "dur", "pid", "tid", "name"] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert_eq!(obj["ph"], "X");
    }
}

//! `ring2d` command line: `verify`, `simulate`, `plan`, `scale`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or I/O
//! error. Random inputs come from ChaCha8 seeded with `--seed`, one stream
//! per verification case, so reports are identical across runs and
//! platforms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{
    build_rank_grid, validate, ClusterConfig, ConfigFile, ModelConfig, ParallelConfig, Placement,
};
use crate::cost::{bubble_rate, objective, scalability, ScalabilityReport, SpMode};
use crate::error::{Error, Result};
use crate::oracle::full_attention;
use crate::planner::{self, PlanOptions, RankKey};
use crate::ring::run_2d_attention;
use crate::sim::{simulate, trace_json, Summary};
use crate::tensor::{DenseTensor, Scalar};

/// Largest sequence `verify` accepts.
pub const MAX_VERIFY_SEQ: usize = 256;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ring2d",
    version,
    about = "2D (head x context) parallel attention toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check distributed attention against the dense oracle.
    Verify(VerifyArgs),
    /// Simulate one layer's timeline and optionally export a Chrome trace.
    Simulate(SimulateArgs),
    /// Rank parallel configurations for a GPU budget.
    Plan(PlanArgs),
    /// Report the GPU ceiling of head-only vs 2D sequence parallelism.
    Scale(ScaleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-5,
            Precision::F64 => 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Key {
    Objective,
    Sim,
}

#[derive(Debug, Clone, Args)]
pub struct Output {
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Check a single configuration instead of the default lattice.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Flip the sign of the first case's output before comparing.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub output: Output,
    /// Chrome trace output path.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Sequence-parallel GPUs to plan for; defaults to the config's d_sp.
    #[arg(long)]
    pub gpus: Option<usize>,
    #[arg(long, value_enum, default_value = "objective")]
    pub key: Key,
    /// Drop configurations above the cluster's per-GPU memory.
    #[arg(long)]
    pub memory_filter: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args)]
pub struct ScaleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Pipeline stages for the bubble-rate line.
    #[arg(long)]
    pub pp: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

/// Result of a command: text to emit plus an exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub body: String,
    pub exit_code: i32,
    /// Short human line for stdout when the body goes to a file.
    pub headline: String,
}

/// Parses `args` (including the program name), runs the command, writes
/// output and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Runs a parsed command and writes its output.
pub fn execute(cmd: &Command) -> Result<i32> {
    let (report, output) = match cmd {
        Command::Verify(a) => (cmd_verify(a)?, &a.output),
        Command::Simulate(a) => (cmd_simulate(a)?, &a.output),
        Command::Plan(a) => (cmd_plan(a)?, &a.output),
        Command::Scale(a) => (cmd_scale(a)?, &a.output),
    };
    match &output.out {
        Some(path) => {
            std::fs::write(path, &report.body)?;
            println!("{}", report.headline);
        }
        None => print!("{}", report.body),
    }
    Ok(report.exit_code)
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)?;
    ConfigFile::from_json(&text).map_err(|e| match e {
        Error::Parse(p) => Error::Invalid(format!(
            "{}: line {}, column {}: {p}\n  | {}",
            path.display(),
            p.line(),
            p.column(),
            text.lines().nth(p.line().saturating_sub(1)).unwrap_or("")
        )),
        other => other,
    })
}

/// One oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCase {
    pub heads: usize,
    pub kv_heads: usize,
    pub seq_len: usize,
    pub d_hp: usize,
    pub d_cp: usize,
    pub w: usize,
    pub placement: Placement,
    pub causal: bool,
}

impl VerifyCase {
    pub fn name(&self) -> String {
        format!(
            "H={} H_kv={} S={} d_hp={} d_cp={} w={} {} {}",
            self.heads,
            self.kv_heads,
            self.seq_len,
            self.d_hp,
            self.d_cp,
            self.w,
            self.placement,
            if self.causal { "causal" } else { "full" }
        )
    }

    pub fn model(&self, head_dim: usize) -> ModelConfig {
        ModelConfig::gqa(
            self.seq_len,
            self.heads,
            self.kv_heads,
            self.heads * head_dim,
        )
    }

    pub fn parallel(&self) -> ParallelConfig {
        ParallelConfig::new(self.d_hp, self.d_cp, self.w, self.placement)
    }
}

/// Head dimension used by `verify`.
pub const VERIFY_HEAD_DIM: usize = 4;

/// Every valid configuration with `d_sp` in {1, 2, 4, 8, 16}, each `w`
/// dividing `d_cp`, both placements, `H` in {4, 8}, `H_kv` in {2, 4, H},
/// `S` in {16, 32, 64}, causal and not.
pub fn default_lattice() -> Vec<VerifyCase> {
    let cluster = ClusterConfig::default();
    let mut cases = Vec::new();
    for heads in [4, 8] {
        let mut kv: Vec<usize> = vec![2, 4, heads];
        kv.dedup();
        for kv_heads in kv {
            for seq_len in [16, 32, 64] {
                for d_sp in [1, 2, 4, 8, 16] {
                    for d_hp in (1..=d_sp).filter(|d| d_sp % d == 0) {
                        let d_cp = d_sp / d_hp;
                        for w in (1..=d_cp).filter(|w| d_cp % w == 0) {
                            for placement in Placement::ALL {
                                for causal in [false, true] {
                                    let c = VerifyCase {
                                        heads,
                                        kv_heads,
                                        seq_len,
                                        d_hp,
                                        d_cp,
                                        w,
                                        placement,
                                        causal,
                                    };
                                    let m = c.model(VERIFY_HEAD_DIM);
                                    if validate(&m, &c.parallel(), &cluster).is_valid() {
                                        cases.push(c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cases
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Random Q, K, V for `case` from stream `stream` of the seeded generator.
pub fn case_inputs<T: Scalar>(
    case: &VerifyCase,
    head_dim: usize,
    seed: u64,
    stream: u64,
) -> (DenseTensor<T>, DenseTensor<T>, DenseTensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let q = DenseTensor::<f64>::random(case.heads, case.seq_len, head_dim, &mut rng);
    let k = DenseTensor::<f64>::random(case.kv_heads, case.seq_len, head_dim, &mut rng);
    let v = DenseTensor::<f64>::random(case.kv_heads, case.seq_len, head_dim, &mut rng);
    (q.cast(), k.cast(), v.cast())
}

/// Max |2D output - oracle| for one case.
pub fn run_case<T: Scalar>(
    case: &VerifyCase,
    seed: u64,
    stream: u64,
    cluster: &ClusterConfig,
    flip_sign: bool,
) -> Result<f64> {
    let model = case.model(VERIFY_HEAD_DIM);
    let par = case.parallel();
    validate(&model, &par, cluster).into_result()?;
    let grid = build_rank_grid(&par, cluster)?;
    let (q, k, v) = case_inputs::<T>(case, VERIFY_HEAD_DIM, seed, stream);
    let mut out = run_2d_attention(&q, &k, &v, &model, &par, &grid, case.causal)?;
    if flip_sign {
        out = out.map(|x| -x);
    }
    let (expected, _) = full_attention(&q, &k, &v, case.causal)?;
    out.max_abs_diff(&expected)
}

fn cmd_verify(a: &VerifyArgs) -> Result<Report> {
    let (cases, cluster) = match &a.config {
        Some(path) => {
            let cfg = load_config(path)?;
            cfg.validate().into_result()?;
            let m = &cfg.model;
            if m.seq_len > MAX_VERIFY_SEQ {
                return Err(Error::Invalid(format!(
                    "verify runs at desk scale: S = {} exceeds {MAX_VERIFY_SEQ}",
                    m.seq_len
                )));
            }
            let p = &cfg.parallel;
            let cases = [false, true]
                .map(|causal| VerifyCase {
                    heads: m.heads,
                    kv_heads: m.kv_heads,
                    seq_len: m.seq_len,
                    d_hp: p.d_hp,
                    d_cp: p.d_cp,
                    w: p.inner_ring,
                    placement: p.placement,
                    causal,
                })
                .to_vec();
            (cases, cfg.cluster)
        }
        None => (default_lattice(), ClusterConfig::default()),
    };
    let tol = a.precision.tolerance();
    let mut results = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let flip = a.inject_fault && i == 0;
        let diff = match a.precision {
            Precision::F32 => run_case::<f32>(case, a.seed, i as u64, &cluster, flip)?,
            Precision::F64 => run_case::<f64>(case, a.seed, i as u64, &cluster, flip)?,
        };
        results.push(CaseResult {
            case: case.name(),
            max_abs_diff: diff,
            pass: diff <= tol,
        });
    }
    let failures: Vec<&CaseResult> = results.iter().filter(|r| !r.pass).collect();
    for f in &failures {
        eprintln!("FAIL {} max|diff| = {:e}", f.case, f.max_abs_diff);
    }
    let worst = results.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let headline = format!(
        "verify: {} cases, {} failed, worst max|diff| = {worst:e} (tolerance {tol:e})",
        results.len(),
        failures.len()
    );
    let body = match a.output.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                seed: u64,
                precision: &'a str,
                tolerance: f64,
                cases: usize,
                failed: usize,
                worst: f64,
                results: &'a [CaseResult],
            }
            json_line(&Out {
                seed: a.seed,
                precision: match a.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                },
                tolerance: tol,
                cases: results.len(),
                failed: failures.len(),
                worst,
                results: &results,
            })?
        }
        Format::Csv => csv_string(&results)?,
    };
    Ok(Report {
        body,
        exit_code: if failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_FAILED
        },
        headline,
    })
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Report> {
    let cfg = load_config(&a.config)?;
    cfg.validate().into_result()?;
    let grid = cfg.grid()?;
    let timeline = simulate(&cfg.model, &cfg.parallel, &cfg.cluster, &grid)?;
    if let Some(path) = &a.trace {
        std::fs::write(path, trace_json(&timeline))?;
    }
    let summary = timeline.summary();
    let cost = objective(&cfg.model, &cfg.parallel, &cfg.cluster, &grid);
    let headline = format!(
        "simulate: makespan {:.6} ms, exposed comm {:.6} ms, objective {:.6} ms",
        summary.makespan * 1e3,
        summary.exposed_comm * 1e3,
        cost.objective * 1e3
    );
    let body = match a.output.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                #[serde(flatten)]
                summary: &'a Summary,
                objective: f64,
                events: usize,
            }
            json_line(&Out {
                summary: &summary,
                objective: cost.objective,
                events: timeline.events.len(),
            })?
        }
        Format::Csv => {
            #[derive(Serialize)]
            struct Row {
                rank: usize,
                kind: String,
                name: String,
                resource: String,
                start: f64,
                end: f64,
            }
            let rows: Vec<Row> = timeline
                .events
                .iter()
                .map(|e| Row {
                    rank: e.rank,
                    kind: format!("{:?}", e.kind),
                    name: e.name(),
                    resource: e.resource.to_string(),
                    start: e.start,
                    end: e.end,
                })
                .collect();
            csv_string(&rows)?
        }
    };
    Ok(Report {
        body,
        exit_code: EXIT_OK,
        headline,
    })
}

fn cmd_plan(a: &PlanArgs) -> Result<Report> {
    let cfg = load_config(&a.config)?;
    let d_sp = match a.gpus {
        Some(g) => {
            let d_dp = cfg.parallel.d_dp.max(1);
            if g == 0 || g % d_dp != 0 {
                return Err(Error::Divisibility {
                    what: "--gpus",
                    value: g,
                    divisor: d_dp,
                });
            }
            g / d_dp
        }
        None => cfg.parallel.d_sp(),
    };
    let opts = PlanOptions {
        key: match a.key {
            Key::Objective => RankKey::Objective,
            Key::Sim => RankKey::SimMakespan,
        },
        memory_filter: a.memory_filter,
    };
    let ranked = planner::plan(&cfg.model, d_sp, &cfg.cluster, opts).map_err(|e| match e {
        Error::Invalid(_) => Error::Invalid(format!("no valid configuration for d_sp = {d_sp}")),
        other => other,
    })?;
    let top = &ranked[0];
    let headline = format!(
        "plan: {} configurations, best d_hp={} d_cp={} w={} {} ({:.6} ms)",
        ranked.len(),
        top.par.d_hp,
        top.par.d_cp,
        top.par.inner_ring,
        top.par.placement,
        top.score(opts.key) * 1e3
    );
    let body = match a.output.format {
        Format::Json => {
            let mut s = planner::to_json(&ranked)?;
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut buf = Vec::new();
            planner::write_csv(&ranked, &mut buf)?;
            String::from_utf8(buf).expect("csv is utf-8")
        }
    };
    Ok(Report {
        body,
        exit_code: EXIT_OK,
        headline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleReport {
    pub seq_len: usize,
    pub global_batch: usize,
    pub heads: usize,
    pub ulysses: ScalabilityReport,
    pub two_d: ScalabilityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline_stages: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bubble_rate: Option<f64>,
}

pub fn scale_report(model: &ModelConfig, pp: Option<usize>, d_dp: usize) -> ScaleReport {
    ScaleReport {
        seq_len: model.seq_len,
        global_batch: model.global_batch,
        heads: model.heads,
        ulysses: scalability(model, SpMode::Ulysses),
        two_d: scalability(model, SpMode::TwoD),
        pipeline_stages: pp,
        bubble_rate: pp.map(|p| bubble_rate(model, d_dp, p)),
    }
}

fn cmd_scale(a: &ScaleArgs) -> Result<Report> {
    let cfg = load_config(&a.config)?;
    let r = scale_report(&cfg.model, a.pp, cfg.parallel.d_dp);
    let mut headline = String::new();
    let _ = write!(
        headline,
        "scale: head-parallel only tops out at {} GPUs; 2D is unbounded",
        r.ulysses.max_gpus.unwrap_or(0)
    );
    let body = match a.output.format {
        Format::Json => json_line(&r)?,
        Format::Csv => {
            #[derive(Serialize)]
            struct Row {
                mode: SpMode,
                max_d_dp: usize,
                max_d_sp: Option<usize>,
                max_gpus: Option<usize>,
            }
            let rows: Vec<Row> = [&r.ulysses, &r.two_d]
                .into_iter()
                .map(|s| Row {
                    mode: s.mode,
                    max_d_dp: s.max_d_dp,
                    max_d_sp: s.max_d_sp,
                    max_gpus: s.max_gpus,
                })
                .collect();
            csv_string(&rows)?
        }
    };
    Ok(Report {
        body,
        exit_code: EXIT_OK,
        headline,
    })
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_is_valid_and_nonempty() {
        let cases = default_lattice();
        assert!(cases.len() > 500);
        assert!(cases
            .iter()
            .any(|c| c.d_hp == 8 && c.heads == 8 && c.kv_heads == 2));
        assert!(cases.iter().all(|c| c.seq_len % (2 * c.d_hp * c.d_cp) == 0));
    }

    #[test]
    fn flipped_sign_fails() {
        let case = VerifyCase {
            heads: 4,
            kv_heads: 2,
            seq_len: 16,
            d_hp: 2,
            d_cp: 2,
            w: 1,
            placement: Placement::HeadFirst,
            causal: true,
        };
        let c = ClusterConfig::default();
        assert!(run_case::<f64>(&case, 1, 0, &c, false).unwrap() <= 1e-10);
        assert!(run_case::<f64>(&case, 1, 0, &c, true).unwrap() > 1e-3);
    }

    #[test]
    fn parses_all_subcommands() {
        for args in [
            vec!["ring2d", "verify", "--seed", "7", "--precision", "f32"],
            vec![
                "ring2d", "simulate", "--config", "c.json", "--trace", "t.json",
            ],
            vec![
                "ring2d", "plan", "--config", "c.json", "--gpus", "64", "--key", "sim", "--format",
                "csv",
            ],
            vec!["ring2d", "scale", "--config", "c.json", "--pp", "4"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
    }
}

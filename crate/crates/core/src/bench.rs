//! Evaluation harness: grids, error reports against the reference controls,
//! multi-seed case runs with their on-disk layout, residual curves, the
//! dimension sweep, runtime scaling and the bridge study.
//!
//! Layout written by [`run_case`] under `out/<case>/`:
//! `<seed>/{policy.ckpt, trace.csv, projection.csv, errors.csv, residual.csv}`
//! plus `reference.csv`, `summary.csv` and `summary.txt`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::adjoint::{bridge_residual, BridgeComponents, BridgeConfig};
use crate::config::{BuiltProblem, MertonConfig, Method, ProblemConfig, RunConfig};
use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::output::{fmt_f64, provenance, CsvTable};
use crate::parallel::Workers;
use crate::policy::{MlpPolicy, Policy};
use crate::problems::{ControlBlock, ControlProblem};
use crate::reference::{case1_reference, case2_reference, case3_reference, RICCATI_STEPS};
use crate::rng::{mix_keys, NoiseStream};
use crate::stage1::{warm_start, TrainOutcome};
use crate::stage2::{
    hamiltonian, project, project_grid, residual_field, ControlSource, ProjectionConfig,
    ProjectionRecord,
};
use crate::stats;

const GRID_KEY: u64 = 0x6772_6964;
const TRAIN_KEY: u64 = 0x7472_6169;
const PROJECT_KEY: u64 = 0x7072_6f6a;
const RESIDUAL_KEY: u64 = 0x7265_7369;
const BRIDGE_KEY: u64 = 0x6272_6467;

/// Query points `(t, x)`: `N_t` times `i T / N_t` crossed with state points on
/// one or more 1-D slices of the box.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub queries: Vec<(f64, Vec<f64>)>,
    /// Domain measure attached to each query when `L1` is measure-weighted.
    pub cell_measure: f64,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

impl EvalGrid {
    /// For `d = 1` the state points are `N_x` uniform points on `[lo, hi]`.
    /// For `d > 1` they are `N_x` points on every axis-aligned slice through
    /// the box centre plus `random_slices` seeded random directions.
    pub fn new(
        horizon: f64,
        n_t: usize,
        lo: &[f64],
        hi: &[f64],
        n_x: usize,
        random_slices: usize,
    ) -> Result<Self> {
        let d = lo.len();
        if n_t == 0 || n_x == 0 || d == 0 || hi.len() != d {
            return Err(Error::InvalidParameter(
                "grid needs times, points and a box".into(),
            ));
        }
        let times: Vec<f64> = (0..n_t).map(|i| horizon * i as f64 / n_t as f64).collect();
        let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
        let mut states = Vec::new();
        if d == 1 {
            states.extend(linspace(lo[0], hi[0], n_x).into_iter().map(|v| vec![v]));
        } else {
            for axis in 0..d {
                for v in linspace(lo[axis], hi[axis], n_x) {
                    let mut x = center.clone();
                    x[axis] = v;
                    states.push(x);
                }
            }
            for s in 0..random_slices {
                let mut dir = vec![0.0; d];
                NoiseStream::new(mix_keys(&[GRID_KEY]), s as u64, d).standard_normals(0, &mut dir);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let reach = dir
                    .iter()
                    .zip(&half)
                    .map(|(v, h)| {
                        if v.abs() > 0.0 {
                            h * norm / v.abs()
                        } else {
                            f64::INFINITY
                        }
                    })
                    .fold(f64::INFINITY, f64::min);
                for r in linspace(-reach, reach, n_x) {
                    states.push(
                        center
                            .iter()
                            .zip(&dir)
                            .map(|(c, v)| c + r * v / norm)
                            .collect(),
                    );
                }
            }
        }
        let volume: f64 = half.iter().map(|h| 2.0 * h).filter(|w| *w > 0.0).product();
        let queries: Vec<(f64, Vec<f64>)> = times
            .iter()
            .flat_map(|&t| states.iter().map(move |x| (t, x.clone())))
            .collect();
        let cell_measure = horizon * volume;
        Ok(EvalGrid {
            times,
            states,
            queries,
            cell_measure,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let (lo, hi) = cfg.grid_box();
        Self::new(
            cfg.problem.horizon(),
            cfg.grid.times,
            &lo,
            &hi,
            cfg.grid.points,
            cfg.grid.random_slices,
        )
    }

    /// Smaller grid over the same box for residual curves.
    pub fn residual_subgrid(cfg: &RunConfig) -> Result<Self> {
        let (lo, hi) = cfg.grid_box();
        Self::new(
            cfg.problem.horizon(),
            cfg.residual.times,
            &lo,
            &hi,
            cfg.residual.points,
            0,
        )
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub block: String,
    pub l1: f64,
    pub linf: f64,
}

/// `L1`: grid mean of the per-point absolute error summed over the block's
/// coordinates (times `measure` when given). `L_inf`: the grid maximum of the
/// same per-point quantity. Failed points are skipped.
pub fn grid_error(
    candidate: &[Option<Vec<f64>>],
    reference: &[Vec<f64>],
    blocks: &[ControlBlock],
    measure: Option<f64>,
) -> Vec<BlockError> {
    blocks
        .iter()
        .map(|b| {
            let per_point: Vec<f64> = candidate
                .iter()
                .zip(reference)
                .filter_map(|(c, r)| {
                    c.as_ref()
                        .map(|c| b.range.clone().map(|i| (c[i] - r[i]).abs()).sum::<f64>())
                })
                .collect();
            let l1 = if per_point.is_empty() {
                f64::NAN
            } else {
                stats::mean(&per_point) * measure.unwrap_or(1.0)
            };
            let linf = per_point.iter().fold(0.0f64, |a, v| a.max(*v));
            BlockError {
                block: b.name.clone(),
                l1,
                linf,
            }
        })
        .collect()
}

pub fn evaluate_policy(policy: &dyn Policy, grid: &EvalGrid) -> Vec<Option<Vec<f64>>> {
    grid.queries
        .iter()
        .map(|(t, x)| policy.act(*t, x).ok())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub method: Method,
    pub seed: u64,
    pub blocks: Vec<BlockError>,
    pub evaluated: usize,
    pub failures: usize,
}

impl ErrorRow {
    pub fn block(&self, name: &str) -> Option<&BlockError> {
        self.blocks.iter().find(|b| b.block == name)
    }

    /// `L1` summed over blocks.
    pub fn total_l1(&self) -> f64 {
        self.blocks.iter().map(|b| b.l1).sum()
    }
}

/// Reference control of the configured case.
pub fn reference_policy(cfg: &RunConfig, problem: &BuiltProblem) -> Result<Box<dyn Policy>> {
    Ok(match (&cfg.problem, problem) {
        (ProblemConfig::Case1(_), BuiltProblem::Lq(p)) => {
            Box::new(case1_reference(p, &cfg.kernel, RICCATI_STEPS)?)
        }
        (ProblemConfig::Case2(_), BuiltProblem::Merton(p)) => {
            Box::new(case2_reference(p, &cfg.kernel)?)
        }
        (ProblemConfig::Case3(_), BuiltProblem::Merton(p)) => {
            Box::new(case3_reference(p, &cfg.kernel)?)
        }
        _ => unreachable!("problem built from this config"),
    })
}

pub fn train_seed(seed: u64) -> u64 {
    mix_keys(&[seed, TRAIN_KEY])
}

pub fn projection_seed(seed: u64) -> u64 {
    mix_keys(&[seed, PROJECT_KEY])
}

/// Stage 1 for one seed: fresh policy initialized from `seed`, then `K0`
/// ascent steps.
pub fn train(
    cfg: &RunConfig,
    problem: &dyn ControlProblem,
    seed: u64,
    workers: &Workers,
    observer: Option<&mut dyn FnMut(usize, &MlpPolicy) -> Result<()>>,
) -> Result<TrainOutcome> {
    let policy = cfg.initial_policy(problem, seed)?;
    warm_start(
        problem,
        &cfg.kernel,
        policy,
        &cfg.anchor_distribution(),
        &cfg.stage1,
        train_seed(seed),
        workers,
        observer,
    )
}

/// Everything produced for one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub policy: MlpPolicy,
    pub training: TrainOutcome,
    pub projections: Vec<std::result::Result<ProjectionRecord, String>>,
    pub rows: Vec<ErrorRow>,
    /// Max `||d_u H||_inf` at interior projected queries.
    pub stationarity_max: f64,
    /// Queries where `H(u_hat) < H(u_warm)`.
    pub ascent_violations: usize,
    pub interior_queries: usize,
    /// Grid mean of `||d_u H||_1` at the policy and at the projection.
    pub residual_policy: f64,
    pub residual_projected: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub block: String,
    pub l1_mean: f64,
    pub l1_std: f64,
    pub linf_mean: f64,
    pub linf_std: f64,
    pub seeds: usize,
    pub failed_seeds: usize,
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub case: String,
    pub config_hash: String,
    pub runs: Vec<std::result::Result<SeedRun, String>>,
    pub summary: Vec<SummaryRow>,
    pub grid: EvalGrid,
    pub reference: Vec<Vec<f64>>,
}

impl CaseReport {
    pub fn successful(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn summary_row(&self, method: Method, block: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.block == block)
    }

    pub fn rows(&self, method: Method) -> Vec<&ErrorRow> {
        self.successful()
            .flat_map(|r| r.rows.iter().filter(move |row| row.method == method))
            .collect()
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        stats::sample_variance(xs).sqrt()
    }
}

fn summarize(
    runs: &[std::result::Result<SeedRun, String>],
    methods: &[Method],
    blocks: &[ControlBlock],
) -> Vec<SummaryRow> {
    let failed = runs.iter().filter(|r| r.is_err()).count();
    let mut out = Vec::new();
    for &method in methods {
        for b in blocks {
            let (l1, linf): (Vec<f64>, Vec<f64>) = runs
                .iter()
                .filter_map(|r| r.as_ref().ok())
                .flat_map(|r| r.rows.iter())
                .filter(|row| row.method == method)
                .filter_map(|row| row.block(&b.name).map(|e| (e.l1, e.linf)))
                .unzip();
            out.push(SummaryRow {
                method,
                block: b.name.clone(),
                l1_mean: stats::mean(&l1),
                l1_std: sample_std(&l1),
                linf_mean: stats::mean(&linf),
                linf_std: sample_std(&linf),
                seeds: l1.len(),
                failed_seeds: failed,
            });
        }
    }
    out
}

/// `||d_u H||_1` at `u` for the record's plug-in costate.
fn residual_at(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    rec: &ProjectionRecord,
    u: &[f64],
) -> Result<f64> {
    let h = hamiltonian(
        problem,
        kernel,
        rec.t,
        rec.t,
        &rec.x,
        u,
        &rec.lambda,
        rec.z.as_deref(),
    )?;
    Ok(h.grad.iter().map(|g| g.abs()).sum())
}

fn run_seed(
    cfg: &RunConfig,
    problem: &dyn ControlProblem,
    grid: &EvalGrid,
    reference: &[Vec<f64>],
    seed: u64,
    workers: &Workers,
) -> Result<SeedRun> {
    let blocks = problem.control_blocks();
    let measure = cfg.grid.measure_weighted.then_some(grid.cell_measure);
    let training = train(cfg, problem, seed, workers, None)?;
    let policy = training.policy.clone();
    let mut rows = Vec::new();
    let mut projections = Vec::new();
    let mut stationarity_max = 0.0f64;
    let mut ascent_violations = 0;
    let mut interior_queries = 0;
    let mut residual_policy = Vec::new();
    let mut residual_projected = Vec::new();
    for &method in &cfg.methods {
        let candidate = match method {
            Method::Dpo => evaluate_policy(&policy, grid),
            Method::Pgdpo => {
                let recs = project_grid(
                    problem,
                    &cfg.kernel,
                    &policy,
                    &grid.queries,
                    &cfg.stage2,
                    projection_seed(seed),
                    workers,
                );
                let mut controls = Vec::with_capacity(recs.len());
                for rec in recs {
                    match rec {
                        Ok(r) => {
                            let interior = (0..problem.num_constraints())
                                .all(|i| problem.constraint(i, &r.x, &r.u) < -1e-6);
                            if interior {
                                interior_queries += 1;
                                stationarity_max = stationarity_max.max(r.grad_inf);
                            }
                            if r.h_final < r.h_warm {
                                ascent_violations += 1;
                            }
                            residual_policy.push(residual_at(problem, &cfg.kernel, &r, &r.u_warm)?);
                            residual_projected.push(residual_at(problem, &cfg.kernel, &r, &r.u)?);
                            controls.push(Some(r.u.clone()));
                            projections.push(Ok(r));
                        }
                        Err(e) => {
                            controls.push(None);
                            projections.push(Err(e.to_string()));
                        }
                    }
                }
                controls
            }
        };
        let failures = candidate.iter().filter(|c| c.is_none()).count();
        rows.push(ErrorRow {
            method,
            seed,
            blocks: grid_error(&candidate, reference, &blocks, measure),
            evaluated: candidate.len() - failures,
            failures,
        });
    }
    Ok(SeedRun {
        seed,
        policy,
        training,
        projections,
        rows,
        stationarity_max,
        ascent_violations,
        interior_queries,
        residual_policy: if residual_policy.is_empty() {
            f64::NAN
        } else {
            stats::mean(&residual_policy)
        },
        residual_projected: if residual_projected.is_empty() {
            f64::NAN
        } else {
            stats::mean(&residual_projected)
        },
    })
}

/// Stage 1, then (for `pgdpo`) Stage 2 on the grid, then errors against the
/// reference, for every seed. Per-seed failures are recorded, not raised.
pub fn run_case(cfg: &RunConfig, out: Option<&Path>, workers: &Workers) -> Result<CaseReport> {
    cfg.validate()?;
    let built = cfg.problem.build()?;
    let problem = built.as_dyn();
    let grid = EvalGrid::from_config(cfg)?;
    let refpol = reference_policy(cfg, &built)?;
    let reference: Vec<Vec<f64>> = grid
        .queries
        .iter()
        .map(|(t, x)| refpol.act(*t, x))
        .collect::<Result<_>>()?;
    let hash = cfg.hash();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, problem, &grid, &reference, seed, workers);
        if let (Some(dir), Ok(r)) = (out, &run) {
            write_seed_outputs(
                &dir.join(cfg.problem.label()).join(seed.to_string()),
                cfg,
                problem,
                &grid,
                r,
                &hash,
            )?;
        }
        runs.push(run.map_err(|e| e.to_string()));
    }
    let summary = summarize(&runs, &cfg.methods, &problem.control_blocks());
    let report = CaseReport {
        case: cfg.problem.label().to_string(),
        config_hash: hash,
        runs,
        summary,
        grid,
        reference,
    };
    if let Some(dir) = out {
        write_case_outputs(&dir.join(cfg.problem.label()), cfg, problem, &report)?;
    }
    Ok(report)
}

fn state_headers(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

/// Projection CSV schema; shared by the reference dump.
pub fn projection_header(d: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(state_headers("x", d));
    h.extend(state_headers("u", m));
    h.extend(
        [
            "grad_inf",
            "m_mc",
            "n_prime",
            "newton_iters",
            "wall_us",
            "status",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

pub fn projection_table(
    problem: &dyn ControlProblem,
    queries: &[(f64, Vec<f64>)],
    records: &[std::result::Result<ProjectionRecord, String>],
) -> CsvTable {
    let dims = problem.dims();
    let mut table = CsvTable::new(projection_header(dims.state, dims.control));
    for ((t, x), rec) in queries.iter().zip(records) {
        let mut row = vec![fmt_f64(*t)];
        row.extend(x.iter().map(|v| fmt_f64(*v)));
        match rec {
            Ok(r) => {
                row.extend(r.u.iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(r.grad_inf));
                row.push(r.samples.to_string());
                row.push(r.steps.to_string());
                row.push(r.newton_iters.to_string());
                row.push(format!("{:.1}", r.wall_us));
                row.push(r.flag.label().to_string());
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), dims.control + 5));
                row.push(format!("error: {}", e.replace(',', ";")));
            }
        }
        table.push(row);
    }
    table
}

/// Wall-clock columns, excluded from reproducibility comparisons.
pub const WALL_TIME_COLUMNS: &[&str] = &["wall_us", "seconds_per_query"];

fn write_seed_outputs(
    dir: &Path,
    cfg: &RunConfig,
    problem: &dyn ControlProblem,
    grid: &EvalGrid,
    run: &SeedRun,
    hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let comment = provenance(hash, run.seed);
    run.policy.save(&dir.join("policy.ckpt"))?;
    trace_table(&run.training).save(&dir.join("trace.csv"), &comment)?;
    if !run.projections.is_empty() {
        projection_table(problem, &grid.queries, &run.projections)
            .save(&dir.join("projection.csv"), &comment)?;
        let d = problem.dims().state;
        let mut header = vec!["t".to_string()];
        header.extend(state_headers("x", d));
        header.push("residual_policy".into());
        header.push("residual_projected".into());
        let mut res = CsvTable::new(header);
        for ((t, x), rec) in grid.queries.iter().zip(&run.projections) {
            let mut row = vec![fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            match rec {
                Ok(r) => {
                    row.push(fmt_f64(residual_at(problem, &cfg.kernel, r, &r.u_warm)?));
                    row.push(fmt_f64(residual_at(problem, &cfg.kernel, r, &r.u)?));
                }
                Err(_) => row.extend([String::new(), String::new()]),
            }
            res.push(row);
        }
        res.save(&dir.join("residual.csv"), &comment)?;
    }
    error_table(&run.rows).save(&dir.join("errors.csv"), &comment)?;
    Ok(())
}

pub fn trace_table(training: &TrainOutcome) -> CsvTable {
    let mut t = CsvTable::new([
        "iter",
        "mean_return",
        "grad_norm",
        "skips",
        "centred_return",
    ]);
    for r in &training.trace {
        t.push(vec![
            r.iter.to_string(),
            fmt_f64(r.mean_return),
            fmt_f64(r.grad_norm),
            r.skips.to_string(),
            r.centred_return.map(fmt_f64).unwrap_or_default(),
        ]);
    }
    t
}

pub fn error_table(rows: &[ErrorRow]) -> CsvTable {
    let mut t = CsvTable::new([
        "method",
        "seed",
        "block",
        "l1",
        "linf",
        "evaluated",
        "failures",
    ]);
    for r in rows {
        for b in &r.blocks {
            t.push(vec![
                r.method.label().into(),
                r.seed.to_string(),
                b.block.clone(),
                fmt_f64(b.l1),
                fmt_f64(b.linf),
                r.evaluated.to_string(),
                r.failures.to_string(),
            ]);
        }
    }
    t
}

pub fn summary_table(report: &CaseReport) -> CsvTable {
    let mut t = CsvTable::new([
        "case",
        "method",
        "block",
        "l1_mean",
        "l1_std",
        "linf_mean",
        "linf_std",
        "seeds",
        "failed_seeds",
    ]);
    for r in &report.summary {
        t.push(vec![
            report.case.clone(),
            r.method.label().into(),
            r.block.clone(),
            fmt_f64(r.l1_mean),
            fmt_f64(r.l1_std),
            fmt_f64(r.linf_mean),
            fmt_f64(r.linf_std),
            r.seeds.to_string(),
            r.failed_seeds.to_string(),
        ]);
    }
    t
}

/// Fixed-width text table of the error summary.
pub fn summary_text(report: &CaseReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} (config {})", report.case, report.config_hash);
    let _ = writeln!(
        s,
        "{:<8} {:<6} {:>24} {:>24}",
        "method", "block", "L1 mean +- std", "Linf mean +- std"
    );
    for r in &report.summary {
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>11.3e} +- {:<9.2e} {:>11.3e} +- {:<9.2e}",
            r.method.label(),
            r.block,
            r.l1_mean,
            r.l1_std,
            r.linf_mean,
            r.linf_std
        );
    }
    for run in &report.runs {
        if let Err(e) = run {
            let _ = writeln!(s, "failed seed: {e}");
        }
    }
    s
}

fn write_case_outputs(
    dir: &Path,
    cfg: &RunConfig,
    problem: &dyn ControlProblem,
    report: &CaseReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let comment = format!(
        "config_hash={} seeds={}",
        report.config_hash,
        seeds.join(";")
    );
    summary_table(report).save(&dir.join("summary.csv"), &comment)?;
    std::fs::write(dir.join("summary.txt"), summary_text(report))?;
    reference_table(problem, &report.grid, &report.reference)
        .save(&dir.join("reference.csv"), &comment)?;
    Ok(())
}

/// Reference controls in the projection schema.
pub fn reference_table(
    problem: &dyn ControlProblem,
    grid: &EvalGrid,
    reference: &[Vec<f64>],
) -> CsvTable {
    let dims = problem.dims();
    let mut t = CsvTable::new(projection_header(dims.state, dims.control));
    for ((tq, x), u) in grid.queries.iter().zip(reference) {
        let mut row = vec![fmt_f64(*tq)];
        row.extend(x.iter().map(|v| fmt_f64(*v)));
        row.extend(u.iter().map(|v| fmt_f64(*v)));
        row.extend(
            ["0", "0", "0", "0", "0.0", "reference"]
                .iter()
                .map(|s| s.to_string()),
        );
        t.push(row);
    }
    t
}

#[derive(Clone, Debug)]
pub struct ResidualCurve {
    /// `(stage-1 iteration, R_warmup)`
    pub checkpoints: Vec<(usize, f64)>,
    pub warmup_final: f64,
    pub projected: f64,
    pub policy: MlpPolicy,
}

/// `R` of the Stage-1 policy every `residual.every` iterations on the residual
/// sub-grid, then once for the final policy and its projection.
pub fn residual_curve(cfg: &RunConfig, seed: u64, workers: &Workers) -> Result<ResidualCurve> {
    cfg.validate()?;
    let built = cfg.problem.build()?;
    let problem = built.as_dyn();
    let grid = EvalGrid::residual_subgrid(cfg)?;
    let rseed = mix_keys(&[seed, RESIDUAL_KEY]);
    let mut checkpoints = Vec::new();
    let every = cfg.residual.every;
    let mut observer = |iter: usize, p: &MlpPolicy| -> Result<()> {
        if iter.is_multiple_of(every) || iter == cfg.stage1.iterations {
            let r = residual_field(
                ControlSource::Policy(p),
                &grid.queries,
                problem,
                &cfg.kernel,
                &cfg.stage2,
                rseed,
                workers,
            )?;
            checkpoints.push((iter, r.mean));
        }
        Ok(())
    };
    let training = train(cfg, problem, seed, workers, Some(&mut observer))?;
    let warmup_final = checkpoints.last().map(|c| c.1).unwrap_or(f64::NAN);
    let projected = residual_field(
        ControlSource::Projected(&training.policy),
        &grid.queries,
        problem,
        &cfg.kernel,
        &cfg.stage2,
        rseed,
        workers,
    )?
    .mean;
    Ok(ResidualCurve {
        checkpoints,
        warmup_final,
        projected,
        policy: training.policy,
    })
}

pub fn residual_curve_table(curve: &ResidualCurve) -> CsvTable {
    let mut t = CsvTable::new(["stage", "iter", "residual"]);
    for (iter, r) in &curve.checkpoints {
        t.push(vec!["warmup".into(), iter.to_string(), fmt_f64(*r)]);
    }
    let last = curve.checkpoints.last().map_or(0, |c| c.0);
    t.push(vec![
        "warmup_final".into(),
        last.to_string(),
        fmt_f64(curve.warmup_final),
    ]);
    t.push(vec![
        "projected".into(),
        last.to_string(),
        fmt_f64(curve.projected),
    ]);
    t
}

/// Reproducible market with `d` assets: `Sigma = A A^T + 0.01 I` with
/// `A_ij ~ N(0, 0.04 / d)`, and `mu - r = Sigma w` for a Merton fraction `w`
/// with entries in `[0.75, 2.25] / d`.
pub fn sweep_market(d: usize, seed: u64, base: &MertonConfig) -> MertonConfig {
    let mut a = vec![0.0; d * d];
    NoiseStream::new(seed, d as u64, d * d).standard_normals(0, &mut a);
    let scale = 0.2 / (d as f64).sqrt();
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[i * d + k] * a[j * d + k];
            }
            cov[i][j] = scale * scale * acc + if i == j { 0.01 } else { 0.0 };
        }
    }
    let mut w = vec![0.0; d];
    NoiseStream::new(seed, (d as u64) << 32, d).standard_normals(1, &mut w);
    let w: Vec<f64> = w
        .iter()
        .map(|z| 1.5 * (1.0 + 0.25 * z.clamp(-2.0, 2.0)) / d as f64)
        .collect();
    let excess = (0..d)
        .map(|i| (0..d).map(|j| cov[i][j] * w[j]).sum())
        .collect();
    MertonConfig {
        assets: d,
        excess: Some(excess),
        covariance: Some(cov),
        ..base.clone()
    }
}

/// Configuration the sweep runs for dimension `d`.
pub fn sweep_config(base: &RunConfig, d: usize) -> Result<RunConfig> {
    let ProblemConfig::Case2(m) = &base.problem else {
        return Err(Error::config(
            "problem.case",
            "the dimension sweep runs on case2",
        ));
    };
    let mut cfg = base.clone();
    cfg.problem = ProblemConfig::Case2(sweep_market(d, base.sweep.market_seed, m));
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub dim: usize,
    pub method: Method,
    pub block: String,
    pub l1_mean: f64,
    pub l1_std: f64,
    pub linf_mean: f64,
}

pub fn dimension_sweep(
    base: &RunConfig,
    out: Option<&Path>,
    workers: &Workers,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &d in &base.sweep.dims {
        let cfg = sweep_config(base, d)?;
        let sub = out.map(|o| o.join(format!("d{d}")));
        let report = run_case(&cfg, sub.as_deref(), workers)?;
        for r in &report.summary {
            rows.push(SweepRow {
                dim: d,
                method: r.method,
                block: r.block.clone(),
                l1_mean: r.l1_mean,
                l1_std: r.l1_std,
                linf_mean: r.linf_mean,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> CsvTable {
    let mut t = CsvTable::new(["d", "method", "block", "l1_mean", "l1_std", "linf_mean"]);
    for r in rows {
        t.push(vec![
            r.dim.to_string(),
            r.method.label().into(),
            r.block.clone(),
            fmt_f64(r.l1_mean),
            fmt_f64(r.l1_std),
            fmt_f64(r.linf_mean),
        ]);
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeRow {
    pub samples: usize,
    pub steps: usize,
    pub seconds_per_query: f64,
    pub repetitions: usize,
}

impl RuntimeRow {
    pub fn work(&self) -> usize {
        self.samples * self.steps
    }
}

/// Median wall time of one projected query per `(M_MC, N')`, after one
/// discarded warm-up call. Queries run on a single thread.
pub fn runtime_scaling(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    policy: &dyn Policy,
    query: (f64, &[f64]),
    budgets: &[(usize, usize)],
    repetitions: usize,
    base: &ProjectionConfig,
    seed: u64,
) -> Result<Vec<RuntimeRow>> {
    if repetitions == 0 {
        return Ok(Vec::new());
    }
    let workers = Workers::sequential();
    let mut rows = Vec::new();
    for &(samples, steps) in budgets {
        let cfg = ProjectionConfig {
            samples,
            steps,
            ..base.clone()
        };
        let mut times = Vec::with_capacity(repetitions);
        for rep in 0..=repetitions {
            let clock = Instant::now();
            project(
                problem,
                kernel,
                policy,
                query.0,
                query.1,
                &cfg,
                mix_keys(&[seed, rep as u64]),
                &workers,
            )?;
            let secs = clock.elapsed().as_secs_f64();
            if rep > 0 {
                times.push(secs);
            }
        }
        rows.push(RuntimeRow {
            samples,
            steps,
            seconds_per_query: stats::median(&times),
            repetitions,
        });
    }
    Ok(rows)
}

/// Log-log slope of time per query against `M_MC * N'`.
pub fn runtime_slope(rows: &[RuntimeRow]) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| (r.work() as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.seconds_per_query.ln()).collect();
    stats::ols_slope(&x, &y)
}

pub fn runtime_table(rows: &[RuntimeRow]) -> CsvTable {
    let mut t = CsvTable::new([
        "m_mc",
        "n_prime",
        "work",
        "seconds_per_query",
        "repetitions",
    ]);
    for r in rows {
        t.push(vec![
            r.samples.to_string(),
            r.steps.to_string(),
            r.work().to_string(),
            fmt_f64(r.seconds_per_query),
            r.repetitions.to_string(),
        ]);
    }
    t
}

/// Bridge remainders at every configured prefix time.
#[derive(Clone, Debug)]
pub struct BridgeStudy {
    pub prefix_times: Vec<f64>,
    pub components: Vec<Vec<BridgeComponents>>,
}

impl BridgeStudy {
    /// Whether `||rho|| / dt` strictly decreases along the step sizes at every
    /// prefix time, with each decrease larger than the combined standard error.
    pub fn strictly_decreasing(&self) -> bool {
        self.components.iter().all(|cs| {
            cs.windows(2).all(|w| {
                let drop = w[0].normalized() - w[1].normalized();
                let se = (w[0].std_error / w[0].dt).hypot(w[1].std_error / w[1].dt);
                drop > 0.0 && drop > se
            })
        })
    }
}

pub fn default_bridge_x0(cfg: &RunConfig) -> Vec<f64> {
    if let Some(x) = &cfg.bridge.x0 {
        return x.clone();
    }
    let nu = cfg.anchor_distribution();
    nu.state_lo
        .iter()
        .zip(&nu.state_hi)
        .map(|(a, b)| 0.5 * (a + b) + 0.25 * (b - a))
        .collect()
}

pub fn bridge_study(
    cfg: &RunConfig,
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    seed: u64,
    workers: &Workers,
) -> Result<BridgeStudy> {
    let x0 = default_bridge_x0(cfg);
    let mut components = Vec::new();
    for (i, &tk) in cfg.bridge.prefix_times.iter().enumerate() {
        let bc = BridgeConfig {
            anchor_time: 0.0,
            x0: x0.clone(),
            prefix_time: tk,
            step_sizes: cfg.bridge.step_sizes.clone(),
            fine_dt: cfg.bridge.fine_dt,
            branches: cfg.bridge.branches,
            antithetic: cfg.bridge.antithetic,
            seed: mix_keys(&[seed, BRIDGE_KEY, i as u64]),
        };
        components.push(bridge_residual(problem, policy, &cfg.kernel, &bc, workers)?);
    }
    Ok(BridgeStudy {
        prefix_times: cfg.bridge.prefix_times.clone(),
        components,
    })
}

pub fn bridge_table(study: &BridgeStudy) -> CsvTable {
    let mut t = CsvTable::new([
        "prefix_time",
        "dt",
        "k",
        "rho_norm",
        "rho_over_dt",
        "r_foc_norm",
        "std_err",
        "inconclusive",
    ]);
    for (tk, cs) in study.prefix_times.iter().zip(&study.components) {
        for c in cs {
            t.push(vec![
                fmt_f64(*tk),
                fmt_f64(c.dt),
                c.k.to_string(),
                fmt_f64(c.rho_norm),
                fmt_f64(c.normalized()),
                fmt_f64(c.r_foc_norm()),
                fmt_f64(c.std_error),
                c.inconclusive.to_string(),
            ]);
        }
    }
    t
}

/// Acceptance thresholds of a case run; returns one message per violation.
pub fn check_case(cfg: &RunConfig, report: &CaseReport) -> Vec<String> {
    let th = &cfg.check;
    let mut v = Vec::new();
    for run in &report.runs {
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                v.push(format!("seed failed: {e}"));
                continue;
            }
        };
        if cfg.methods.contains(&Method::Pgdpo) {
            if run.stationarity_max > th.stationarity {
                v.push(format!(
                    "seed {}: max ||d_u H||_inf = {:.3e} exceeds {:.1e}",
                    run.seed, run.stationarity_max, th.stationarity
                ));
            }
            if run.ascent_violations > 0 {
                v.push(format!(
                    "seed {}: {} queries lowered H",
                    run.seed, run.ascent_violations
                ));
            }
        }
        let find = |m: Method| run.rows.iter().find(|r| r.method == m);
        if let (Some(dpo), Some(pg)) = (find(Method::Dpo), find(Method::Pgdpo)) {
            if !(pg.total_l1() < dpo.total_l1()) {
                v.push(format!(
                    "seed {}: pgdpo L1 {:.3e} not below dpo L1 {:.3e}",
                    run.seed,
                    pg.total_l1(),
                    dpo.total_l1()
                ));
            }
        }
        if let Some(pg) = find(Method::Pgdpo) {
            let mut limit = |block: &str, linf: bool, bound: f64| {
                if let Some(e) = pg.block(block) {
                    let value = if linf { e.linf } else { e.l1 };
                    if !(value <= bound) {
                        v.push(format!(
                            "seed {}: {} {} error {:.3e} exceeds {:.1e}",
                            run.seed,
                            block,
                            if linf { "Linf" } else { "L1" },
                            value,
                            bound
                        ));
                    }
                }
            };
            match cfg.problem {
                ProblemConfig::Case1(_) => limit("u", false, th.case1_l1),
                ProblemConfig::Case2(_) => {
                    limit("pi", true, th.case2_pi_linf);
                    limit("c", false, th.case2_c_l1);
                }
                ProblemConfig::Case3(_) => limit("c", false, th.case3_c_l1),
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks() -> Vec<ControlBlock> {
        vec![
            ControlBlock {
                name: "pi".into(),
                range: 0..2,
            },
            ControlBlock {
                name: "c".into(),
                range: 2..3,
            },
        ]
    }

    #[test]
    fn identical_candidate_has_zero_error() {
        let r = vec![vec![0.1, 0.2, 1.0], vec![0.3, 0.4, 2.0]];
        let c: Vec<_> = r.iter().cloned().map(Some).collect();
        for b in grid_error(&c, &r, &blocks(), None) {
            assert_eq!((b.l1, b.linf), (0.0, 0.0));
        }
    }

    #[test]
    fn constant_offset_on_one_coordinate() {
        let r = vec![vec![0.1, 0.2, 1.0], vec![0.3, 0.4, 2.0]];
        let c: Vec<_> = r
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u[2] += 0.1;
                Some(u)
            })
            .collect();
        let e = grid_error(&c, &r, &blocks(), None);
        assert_eq!((e[0].l1, e[0].linf), (0.0, 0.0));
        assert!((e[1].l1 - 0.1).abs() < 1e-15 && (e[1].linf - 0.1).abs() < 1e-15);
    }

    #[test]
    fn failures_are_skipped() {
        let r = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
        let c = vec![None, Some(vec![0.0, 0.0, 1.5])];
        let e = grid_error(&c, &r, &blocks(), None);
        assert_eq!(e[1].l1, 0.5);
    }

    #[test]
    fn grid_shapes() {
        let g = EvalGrid::new(1.0, 16, &[-1.0], &[1.0], 32, 1).unwrap();
        assert_eq!(g.len(), 512);
        assert!(g.queries.iter().all(|(t, _)| *t < 1.0));
        let g = EvalGrid::new(1.0, 4, &[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0], 5, 1).unwrap();
        assert_eq!(g.states.len(), 4 * 5);
        for x in &g.states {
            assert!(
                x.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)),
                "{x:?}"
            );
        }
    }

    #[test]
    fn sweep_market_is_reproducible_and_spd() {
        let base = MertonConfig::default();
        let a = sweep_market(10, 3, &base);
        assert_eq!(a, sweep_market(10, 3, &base));
        let p = ProblemConfig::Case2(a).build();
        assert!(p.is_ok());
    }

    #[test]
    fn zero_repetitions_give_no_rows() {
        use crate::problems::make_case1_lq;
        use crate::reference::case1_reference;
        let p = make_case1_lq(vec![0.0], 1.0, 0.5, 1.0, 0.2, 1.0).unwrap();
        let k = DiscountKernel::SurvivalGamma {
            alpha0: 1.0,
            beta0: 0.2,
        };
        let r = case1_reference(&p, &k, 100).unwrap();
        let rows = runtime_scaling(
            &p,
            &k,
            &r,
            (0.0, &[0.0]),
            &[(4, 4)],
            0,
            &ProjectionConfig::default(),
            0,
        )
        .unwrap();
        assert!(rows.is_empty());
        let s = runtime_table(&rows).to_string("x");
        assert_eq!(s.lines().count(), 2);
    }
}

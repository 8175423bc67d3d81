use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pgdpo_core::bench::{
    self, bridge_study, bridge_table, check_case, dimension_sweep, projection_table,
    residual_curve, residual_curve_table, run_case, runtime_scaling, runtime_slope, runtime_table,
    summary_text, sweep_table, trace_table, EvalGrid,
};
use pgdpo_core::config::{Method, ProblemConfig, RunConfig};
use pgdpo_core::kernels::KernelClass;
use pgdpo_core::output::{fmt_f64, provenance, CsvTable};
use pgdpo_core::rollout::{simulate_batch, write_trajectories_csv};
use pgdpo_core::stage2::project_grid;
use pgdpo_core::{Error, MlpPolicy, Policy, Workers};

#[derive(Parser)]
#[command(
    name = "pgdpo",
    version,
    about = "Pontryagin-guided policy optimization under general discount kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Exit with status 4 when an acceptance threshold is violated.
    #[arg(long)]
    check: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Classify the configured kernel.
    KernelCheck(Common),
    /// Stage 1 only: checkpoint and trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dump trajectories of the trained policy.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Stage 2 at explicit queries or on the evaluation grid.
    Project {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; trains one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query `t,x_1,...,x_d`; repeatable.
        #[arg(long = "query")]
        queries: Vec<String>,
    },
    /// Errors of both methods against the reference on the grid.
    Bench(Common),
    /// Costate/BPTT bridge remainders.
    Bridge {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; trains one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Hamiltonian residual along Stage 1 and after projection.
    Residual(Common),
    /// Case-2 errors across dimensions.
    Sweep(Common),
    /// Per-query wall time against the Monte Carlo budget.
    Runtime {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; an untrained policy is timed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    Check(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

struct Ctx {
    cfg: RunConfig,
    workers: Workers,
    out: PathBuf,
    check: bool,
}

impl Ctx {
    fn new(c: &Common) -> std::result::Result<Self, Failure> {
        let mut cfg = RunConfig::load(&c.config).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", c.config.display())),
            other => Failure::from(other),
        })?;
        if let Some(s) = c.seed {
            cfg.seeds = vec![s];
        }
        if let Some(w) = c.workers {
            cfg.workers = w;
        }
        if let Some(o) = &c.out {
            cfg.output = o.clone();
        }
        cfg.validate()?;
        let workers = Workers::new(cfg.workers)?;
        Ok(Ctx {
            out: cfg.output.clone(),
            cfg,
            workers,
            check: c.check,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn case_dir(&self) -> PathBuf {
        self.out.join(self.cfg.problem.label())
    }

    fn seed_dir(&self) -> PathBuf {
        self.case_dir().join(self.seed().to_string())
    }

    fn comment(&self) -> String {
        provenance(&self.cfg.hash(), self.seed())
    }

    fn verdict(&self, violations: Vec<String>) -> CmdResult {
        for v in &violations {
            eprintln!("check: {v}");
        }
        if self.check && !violations.is_empty() {
            Err(Failure::Check(violations))
        } else {
            Ok(())
        }
    }

    fn policy(&self, checkpoint: Option<&Path>) -> std::result::Result<MlpPolicy, Failure> {
        let built = self.cfg.problem.build()?;
        let problem = built.as_dyn();
        match checkpoint {
            Some(p) => {
                let pol = MlpPolicy::load(p)?;
                let d = problem.dims();
                if pol.state_dim() != d.state || pol.control_dim() != d.control {
                    return Err(Failure::Config(format!(
                        "checkpoint maps R^{} -> R^{}, problem needs R^{} -> R^{}",
                        pol.state_dim(),
                        pol.control_dim(),
                        d.state,
                        d.control
                    )));
                }
                Ok(pol)
            }
            None => Ok(bench::train(&self.cfg, problem, self.seed(), &self.workers, None)?.policy),
        }
    }
}

fn kernel_check(c: &Common) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let k = &ctx.cfg.kernel;
    let report = k.classify(ctx.cfg.problem.horizon(), 64, 1e-12);
    println!("kernel: {}", k.name());
    println!(
        "multiplicativity defect: {:.3e}",
        report.max_multiplicativity_defect
    );
    println!("homogeneity defect: {:.3e}", report.max_homogeneity_defect);
    println!("class: {}", report.class);
    let mut t = CsvTable::new([
        "kernel",
        "class",
        "multiplicativity_defect",
        "homogeneity_defect",
        "resolution",
        "tol",
    ]);
    t.push(vec![
        k.name().into(),
        report.class.label().into(),
        fmt_f64(report.max_multiplicativity_defect),
        fmt_f64(report.max_homogeneity_defect),
        report.resolution.to_string(),
        fmt_f64(report.tol),
    ]);
    t.save(&ctx.out.join("kernel_check.csv"), &ctx.comment())?;
    let expected = ctx.cfg.problem.label();
    let ok = report.class.label() == expected
        || (expected == "case1" && report.class == KernelClass::Exponential);
    ctx.verdict(if ok {
        vec![]
    } else {
        vec![format!(
            "kernel class {} does not match {expected}",
            report.class
        )]
    })
}

fn train(c: &Common, dump_paths: bool) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let built = ctx.cfg.problem.build()?;
    let problem = built.as_dyn();
    let outcome = bench::train(&ctx.cfg, problem, ctx.seed(), &ctx.workers, None)?;
    let dir = ctx.seed_dir();
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    outcome.policy.save(&dir.join("policy.ckpt"))?;
    trace_table(&outcome).save(&dir.join("trace.csv"), &ctx.comment())?;
    if dump_paths {
        let nu = ctx.cfg.anchor_distribution();
        let x0: Vec<f64> = nu
            .state_lo
            .iter()
            .zip(&nu.state_hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let dt = ctx.cfg.stage1.dt;
        let steps = (problem.horizon() / dt).round() as usize;
        let batch = simulate_batch(
            problem,
            &outcome.policy,
            &ctx.cfg.kernel,
            0.0,
            &x0,
            dt,
            steps,
            8,
            bench::train_seed(ctx.seed()),
            true,
            &ctx.workers,
        )?;
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(dir.join("paths.csv")).map_err(Error::from)?,
        );
        write_trajectories_csv(&mut f, &batch.trajectories, &ctx.comment())?;
    }
    println!(
        "trained {} iterations ({} skipped) -> {}",
        outcome.trace.len(),
        outcome.skipped,
        dir.display()
    );
    Ok(())
}

fn parse_query(s: &str, d: usize) -> std::result::Result<(f64, Vec<f64>), Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Failure::Config(format!("query `{s}`: {e}")))?;
    if v.len() != d + 1 {
        return Err(Failure::Config(format!(
            "query `{s}` needs t and {d} state coordinates"
        )));
    }
    Ok((v[0], v[1..].to_vec()))
}

fn project(c: &Common, checkpoint: Option<&Path>, queries: &[String]) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let built = ctx.cfg.problem.build()?;
    let problem = built.as_dyn();
    let d = problem.dims().state;
    let queries: Vec<(f64, Vec<f64>)> = if queries.is_empty() {
        EvalGrid::from_config(&ctx.cfg)?.queries
    } else {
        queries
            .iter()
            .map(|q| parse_query(q, d))
            .collect::<std::result::Result<_, _>>()?
    };
    let policy = ctx.policy(checkpoint)?;
    let records: Vec<_> = project_grid(
        problem,
        &ctx.cfg.kernel,
        &policy,
        &queries,
        &ctx.cfg.stage2,
        bench::projection_seed(ctx.seed()),
        &ctx.workers,
    )
    .into_iter()
    .map(|r| r.map_err(|e| e.to_string()))
    .collect();
    let failed = records.iter().filter(|r| r.is_err()).count();
    let path = ctx.seed_dir().join("projection.csv");
    projection_table(problem, &queries, &records).save(&path, &ctx.comment())?;
    println!(
        "{} queries, {failed} failed -> {}",
        records.len(),
        path.display()
    );
    let th = ctx.cfg.check.stationarity;
    let violations = records
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .filter(|r| r.grad_inf > th || r.h_final < r.h_warm)
        .map(|r| format!("query t={} x={:?}: grad_inf {:.3e}", r.t, r.x, r.grad_inf))
        .collect();
    ctx.verdict(violations)
}

fn bench_cmd(c: &Common) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let report = run_case(&ctx.cfg, Some(&ctx.out), &ctx.workers)?;
    print!("{}", summary_text(&report));
    ctx.verdict(check_case(&ctx.cfg, &report))
}

fn bridge(c: &Common, checkpoint: Option<&Path>) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let built = ctx.cfg.problem.build()?;
    let policy = ctx.policy(checkpoint)?;
    let study = bridge_study(&ctx.cfg, built.as_dyn(), &policy, ctx.seed(), &ctx.workers)?;
    let table = bridge_table(&study);
    table.save(&ctx.seed_dir().join("bridge.csv"), &ctx.comment())?;
    print!("{}", table.to_string(&ctx.comment()));
    let mut v = Vec::new();
    if ctx.cfg.check.bridge_strict_decrease && !study.strictly_decreasing() {
        v.push(
            "bridge remainder / dt does not strictly decrease beyond its standard error"
                .to_string(),
        );
    }
    ctx.verdict(v)
}

fn residual(c: &Common) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let curve = residual_curve(&ctx.cfg, ctx.seed(), &ctx.workers)?;
    residual_curve_table(&curve)
        .save(&ctx.seed_dir().join("residual_curve.csv"), &ctx.comment())?;
    println!(
        "R_warmup_final = {:.6e}, R_projected = {:.6e}",
        curve.warmup_final, curve.projected
    );
    let ratio = ctx.cfg.check.residual_ratio;
    ctx.verdict(if curve.projected < ratio * curve.warmup_final {
        vec![]
    } else {
        vec![format!("R_projected is not below {ratio} x R_warmup_final")]
    })
}

fn sweep(c: &Common) -> CmdResult {
    let ctx = Ctx::new(c)?;
    if !matches!(ctx.cfg.problem, ProblemConfig::Case2(_)) {
        return Err(Failure::Config(
            "config error at `problem.case`: the sweep runs on case2".into(),
        ));
    }
    let rows = dimension_sweep(&ctx.cfg, Some(&ctx.out.join("sweep")), &ctx.workers)?;
    let table = sweep_table(&rows);
    table.save(&ctx.out.join("sweep").join("sweep.csv"), &ctx.comment())?;
    print!("{}", table.to_string(&ctx.comment()));
    let mut v = Vec::new();
    for &d in &ctx.cfg.sweep.dims {
        let l1 = |m: Method| -> f64 {
            rows.iter()
                .filter(|r| r.dim == d && r.method == m)
                .map(|r| r.l1_mean)
                .sum()
        };
        if ctx.cfg.methods.len() == 2
            && l1(Method::Pgdpo).partial_cmp(&l1(Method::Dpo)) != Some(std::cmp::Ordering::Less)
        {
            v.push(format!("d = {d}: pgdpo L1 not below dpo L1"));
        }
    }
    ctx.verdict(v)
}

fn runtime(c: &Common, checkpoint: Option<&Path>) -> CmdResult {
    let ctx = Ctx::new(c)?;
    let built = ctx.cfg.problem.build()?;
    let problem = built.as_dyn();
    // timing does not depend on training, so an untrained policy is fine
    let policy = match checkpoint {
        Some(_) => ctx.policy(checkpoint)?,
        None => ctx.cfg.initial_policy(problem, ctx.seed())?,
    };
    let (lo, hi) = ctx.cfg.grid_box();
    let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let rt = &ctx.cfg.runtime;
    let rows = runtime_scaling(
        problem,
        &ctx.cfg.kernel,
        &policy,
        (rt.query_time, &x),
        &rt.budgets,
        rt.repetitions,
        &ctx.cfg.stage2,
        bench::projection_seed(ctx.seed()),
    )?;
    let table = runtime_table(&rows);
    table.save(&ctx.seed_dir().join("runtime.csv"), &ctx.comment())?;
    print!("{}", table.to_string(&ctx.comment()));
    let mut v = Vec::new();
    if rows.len() >= 2 {
        let slope = runtime_slope(&rows);
        println!("log-log slope: {slope:.4}");
        let (a, b) = ctx.cfg.check.slope_band;
        if !(a..=b).contains(&slope) {
            v.push(format!("runtime slope {slope:.4} outside [{a}, {b}]"));
        }
    }
    ctx.verdict(v)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::KernelCheck(c) => kernel_check(c),
        Command::Train { common, dump_paths } => train(common, *dump_paths),
        Command::Project {
            common,
            checkpoint,
            queries,
        } => project(common, checkpoint.as_deref(), queries),
        Command::Bench(c) => bench_cmd(c),
        Command::Bridge { common, checkpoint } => bridge(common, checkpoint.as_deref()),
        Command::Residual(c) => residual(c),
        Command::Sweep(c) => sweep(c),
        Command::Runtime { common, checkpoint } => runtime(common, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Check(v)) => {
            eprintln!("{} acceptance check(s) failed", v.len());
            ExitCode::from(4)
        }
    }
}

//! Acceptance suite: runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero when any of them fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use pgdpo_core::adjoint::reverse_pass;
use pgdpo_core::bench::{
    self, bridge_study, run_case, runtime_scaling, runtime_slope, CaseReport, EvalGrid,
};
use pgdpo_core::config::{BuiltProblem, Method, RunConfig};
use pgdpo_core::reference::case2_reference;
use pgdpo_core::rollout::simulate;
use pgdpo_core::stage1::{surrogate_gradient, GradientSampling};
use pgdpo_core::{DiscountKernel, ImpatienceProfile, MlpPolicy, Workers};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STATIONARITY: f64 = 1e-8;
const CASE1_L1: f64 = 5e-2;
const CASE2_PI_LINF: f64 = 1e-2;
const CASE2_C_L1: f64 = 1e-2;
const CASE3_C_L1: f64 = 2e-2;
const RESIDUAL_RATIO: f64 = 0.1;
const SLOPE_BAND: (f64, f64) = (0.8, 1.2);
const MIN: u64 = 60;

type Verdict = Result<String, String>;

fn require(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Accuracy budget every benchmark run uses.
fn budgeted(mut cfg: RunConfig, seeds: &[u64]) -> RunConfig {
    cfg.stage2.samples = 4096;
    cfg.stage2.steps = 64;
    cfg.stage1.dt = 1.0 / 64.0;
    cfg.seeds = seeds.to_vec();
    cfg.workers = 1;
    cfg
}

struct CaseRun {
    cfg: RunConfig,
    report: CaseReport,
    elapsed: Duration,
}

/// Benchmark runs shared by several criteria, computed once.
struct Runs {
    root: tempfile::TempDir,
    cases: BTreeMap<&'static str, CaseRun>,
}

impl Runs {
    fn new() -> Self {
        Runs {
            root: tempfile::tempdir().unwrap(),
            cases: BTreeMap::new(),
        }
    }

    fn plan() -> Vec<(&'static str, RunConfig)> {
        let three = [0, 1, 2];
        vec![
            ("case1_beta0.2", budgeted(RunConfig::case1(0.2), &three)),
            ("case1_beta1", budgeted(RunConfig::case1(1.0), &[0])),
            ("case2", budgeted(RunConfig::case2(), &three)),
            (
                "case3_sinusoidal",
                budgeted(
                    RunConfig::case3(ImpatienceProfile::default_sinusoidal()),
                    &three,
                ),
            ),
            (
                "case3_linear",
                budgeted(RunConfig::case3(ImpatienceProfile::default_linear()), &[0]),
            ),
            (
                "case3_exponential",
                budgeted(
                    RunConfig::case3(ImpatienceProfile::default_exponential()),
                    &[0],
                ),
            ),
        ]
    }

    fn dir(&self, name: &str) -> std::path::PathBuf {
        self.root.path().join(name)
    }

    fn get(&mut self, name: &'static str) -> &CaseRun {
        if !self.cases.contains_key(name) {
            let cfg = Self::plan()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1;
            let clock = Instant::now();
            let report = run_case(&cfg, Some(&self.dir(name)), &Workers::sequential()).unwrap();
            let elapsed = clock.elapsed();
            println!(
                "    (bench run {name}: {} seeds, {:.0} s)",
                cfg.seeds.len(),
                elapsed.as_secs_f64()
            );
            self.cases.insert(
                name,
                CaseRun {
                    cfg,
                    report,
                    elapsed,
                },
            );
        }
        &self.cases[name]
    }
}

fn pgdpo_l1(run: &CaseRun, block: &str) -> f64 {
    run.report.rows(Method::Pgdpo)[0].block(block).unwrap().l1
}

fn pgdpo_linf(run: &CaseRun, block: &str) -> f64 {
    run.report.rows(Method::Pgdpo)[0].block(block).unwrap().linf
}

fn case_time_ok(run: &CaseRun, bound: u64) -> Result<(), String> {
    let per_seed = run.elapsed.as_secs_f64() / run.cfg.seeds.len() as f64;
    if per_seed < bound as f64 {
        Ok(())
    } else {
        Err(format!("{per_seed:.0} s per seed exceeds {bound} s"))
    }
}

fn kernel_laws() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mult = 0.0f64;
    let mut homog = 0.0f64;
    for _ in 0..1000 {
        let k = DiscountKernel::SurvivalGamma {
            alpha0: rng.random_range(0.1..5.0),
            beta0: rng.random_range(0.05..5.0),
        };
        let mut p = [
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
        ];
        p.sort_by(f64::total_cmp);
        mult = mult.max(
            k.multiplicativity_defect(p[0], p[1], p[2])
                .map_err(|e| e.to_string())?,
        );

        let k = DiscountKernel::Hyperbolic {
            kappa: rng.random_range(0.0..5.0),
        };
        let s = rng.random_range(0.0..2.0);
        let t = s + rng.random_range(0.0..2.0);
        let h = rng.random_range(0.0..2.0);
        homog = homog.max(k.homogeneity_defect(s, t, h).map_err(|e| e.to_string())?);
    }
    let twelfth = DiscountKernel::Hyperbolic { kappa: 1.0 }
        .multiplicativity_defect(0.0, 1.0, 2.0)
        .map_err(|e| e.to_string())?;
    let gap = (twelfth - 1.0 / 12.0).abs();
    require(
        mult <= 1e-12 && homog <= 1e-14 && gap <= 1e-12,
        format!("survival multiplicativity {mult:.1e}, hyperbolic homogeneity {homog:.1e}, |defect(0,1,2) - 1/12| {gap:.1e}"),
    )
}

fn adjoint_exactness() -> Verdict {
    let mut worst = [0.0f64; 2];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        for b in random_benchmarks(5000 + seed) {
            let p = b.problem.as_ref();
            let pol = random_policy(p, &[8, 8], 77 + seed);
            let steps = 16;
            let t0 = rng.random_range(0.0..0.5);
            let dt = (p.horizon() - t0) / steps as f64;
            let x0 = random_state(p, &mut rng);
            let noise = recorded(seed, steps, p.dims().noise, dt);
            let traj =
                simulate(p, &pol, &b.kernel, t0, &x0, dt, steps, &mut noise.clone()).unwrap();
            let adj = reverse_pass(&traj, Some(&pol)).unwrap();
            let fd_x = gradient(
                |y| frozen_return(p, &pol, &b.kernel, t0, y, dt, steps, &noise),
                &x0,
                1e-3,
            );
            let fd_theta = gradient(
                |th| {
                    let q = MlpPolicy::from_params(pol.spec().clone(), th.to_vec()).unwrap();
                    frozen_return(p, &q, &b.kernel, t0, &x0, dt, steps, &noise)
                },
                pol.params(),
                1e-3,
            );
            worst[0] = worst[0].max(rel_err(adj.lambda(0), &fd_x, 1e-8));
            worst[1] = worst[1].max(rel_err(&adj.theta_grad, &fd_theta, 1e-8));
        }
    }
    require(
        worst[0] <= 1e-6 && worst[1] <= 1e-5,
        format!(
            "max rel err lambda_0 {:.1e}, dJ/dtheta {:.1e} over 20 x 3",
            worst[0], worst[1]
        ),
    )
}

fn bridge() -> Verdict {
    let mut cfg = RunConfig::case1(0.2);
    cfg.bridge.branches = 4096;
    let built = cfg.problem.build().unwrap();
    let w = Workers::sequential();
    let policy = bench::train(&cfg, built.as_dyn(), 0, &w, None)
        .unwrap()
        .policy;
    let study = bridge_study(&cfg, built.as_dyn(), &policy, 0, &w).unwrap();
    let ratios: Vec<String> = study
        .components
        .iter()
        .map(|cs| {
            let r: Vec<String> = cs
                .iter()
                .map(|c| format!("{:.2e}", c.normalized()))
                .collect();
            r.join(">")
        })
        .collect();
    let max_se = study
        .components
        .iter()
        .flatten()
        .map(|c| c.std_error / c.dt)
        .fold(0.0, f64::max);
    require(
        study.strictly_decreasing() && study.components.len() == 3,
        format!("||rho||/dt {} (max se/dt {max_se:.1e})", ratios.join(", ")),
    )
}

fn stationarity(runs: &mut Runs) -> Verdict {
    let mut worst = 0.0f64;
    let mut queries = 0;
    let mut lowered = 0;
    for (name, _) in Runs::plan() {
        for r in runs.get(name).report.successful() {
            worst = worst.max(r.stationarity_max);
            queries += r.interior_queries;
            lowered += r.ascent_violations;
        }
    }
    require(
        worst <= STATIONARITY && lowered == 0 && queries > 0,
        format!(
            "max ||d_u H||_inf {worst:.1e} over {queries} interior queries, {lowered} lowered H"
        ),
    )
}

fn case2_accuracy(runs: &mut Runs) -> Verdict {
    let run = runs.get("case2");
    case_time_ok(run, 15 * MIN)?;
    let pi = pgdpo_linf(run, "pi");
    let c = pgdpo_l1(run, "c");
    require(
        pi <= CASE2_PI_LINF && c <= CASE2_C_L1,
        format!("pi Linf {pi:.2e} (<= {CASE2_PI_LINF:.0e}), c L1 {c:.2e} (<= {CASE2_C_L1:.0e})"),
    )
}

fn case1_accuracy(runs: &mut Runs) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, beta) in [("case1_beta0.2", 0.2), ("case1_beta1", 1.0)] {
        let run = runs.get(name);
        case_time_ok(run, 15 * MIN)?;
        let e = pgdpo_l1(run, "u");
        ok &= e <= CASE1_L1;
        parts.push(format!("beta0 {beta}: L1 {e:.2e}"));
    }
    require(ok, format!("{} (<= {CASE1_L1:.0e})", parts.join(", ")))
}

/// Larger impatience at a fixed date gives larger equilibrium consumption.
fn comovement(run: &CaseRun) -> Result<usize, String> {
    let BuiltProblem::Merton(m) = run.cfg.problem.build().unwrap() else {
        return Err("case 3 builds a Merton problem".into());
    };
    let DiscountKernel::TimeVaryingHyperbolic { profile } = &run.cfg.kernel else {
        return Err("case 3 uses a time-varying kernel".into());
    };
    let times: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
    let at = |kappa: f64, t: f64| {
        case2_reference(&m, &DiscountKernel::Hyperbolic { kappa })
            .unwrap()
            .consumption(t)
    };
    let mut checked = 0;
    for &t in &times {
        for w in times.windows(2) {
            let (k1, k2) = (profile.value(w[0]), profile.value(w[1]));
            if (k2 - k1).abs() < 1e-9 {
                continue;
            }
            let dc = at(k2, t) - at(k1, t);
            if dc.signum() != (k2 - k1).signum() {
                return Err(format!(
                    "c at t={t} moves against k between {} and {}",
                    w[0], w[1]
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn case3_accuracy(runs: &mut Runs) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["case3_linear", "case3_sinusoidal", "case3_exponential"] {
        let run = runs.get(name);
        case_time_ok(run, 15 * MIN)?;
        let e = pgdpo_l1(run, "c");
        let pairs = comovement(run)?;
        ok &= e <= CASE3_C_L1;
        parts.push(format!(
            "{}: c L1 {e:.2e}, {pairs} co-movement pairs",
            &name[6..]
        ));
    }
    require(ok, format!("{} (<= {CASE3_C_L1:.0e})", parts.join("; ")))
}

fn ordering(runs: &mut Runs) -> Verdict {
    let mut total = Duration::ZERO;
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["case1_beta0.2", "case2", "case3_sinusoidal"] {
        let run = runs.get(name);
        total += run.elapsed;
        let pg = run.report.rows(Method::Pgdpo);
        let dpo = run.report.rows(Method::Dpo);
        ok &= pg.len() >= 3 && pg.len() == dpo.len();
        let wins = pg
            .iter()
            .zip(&dpo)
            .filter(|(a, b)| a.total_l1() < b.total_l1())
            .count();
        ok &= wins == pg.len();
        parts.push(format!("{name} {wins}/{}", pg.len()));
    }
    let case1 = &runs.get("case1_beta0.2").report;
    let s_pg = case1.summary_row(Method::Pgdpo, "u").unwrap().l1_std;
    let s_dpo = case1.summary_row(Method::Dpo, "u").unwrap().l1_std;
    ok &= s_pg <= s_dpo;
    ok &= total < Duration::from_secs(60 * MIN);
    require(
        ok,
        format!(
            "pgdpo < dpo on {}; case1 std {s_pg:.1e} vs {s_dpo:.1e}; {:.0} s",
            parts.join(", "),
            total.as_secs_f64()
        ),
    )
}

fn residual_reduction() -> Verdict {
    let mut cfg = RunConfig::case1(0.2);
    cfg.stage2.samples = 4096;
    cfg.stage2.steps = 64;
    let curve =
        bench::residual_curve(&cfg, 0, &Workers::sequential()).map_err(|e| e.to_string())?;
    require(
        curve.projected < RESIDUAL_RATIO * curve.warmup_final && curve.checkpoints.len() >= 2,
        format!(
            "R_projected {:.2e} vs R_warmup_final {:.2e} over {} checkpoints",
            curve.projected,
            curve.warmup_final,
            curve.checkpoints.len()
        ),
    )
}

fn runtime_linearity() -> Verdict {
    let cfg = RunConfig::case2();
    let built = cfg.problem.build().unwrap();
    let p = built.as_dyn();
    let policy = cfg.initial_policy(p, 0).unwrap();
    let grid = EvalGrid::from_config(&cfg).unwrap();
    let (t, x) = &grid.queries[grid.queries.len() / 2];
    let budgets = [(256, 16), (1024, 50), (4096, 100)];
    let rows = runtime_scaling(
        p,
        &cfg.kernel,
        &policy,
        (*t, x),
        &budgets,
        3,
        &cfg.stage2,
        0,
    )
    .unwrap();
    let slope = runtime_slope(&rows);
    let times: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.3}", r.seconds_per_query))
        .collect();
    require(
        (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&slope),
        format!("slope {slope:.3}; seconds per query {}", times.join(", ")),
    )
}

fn unbiasedness() -> Verdict {
    let mut pass = 0usize;
    let mut total = 0usize;
    for cfg in [
        RunConfig::case1(0.2),
        RunConfig::case2(),
        RunConfig::case3(ImpatienceProfile::default_sinusoidal()),
    ] {
        let built = cfg.problem.build().unwrap();
        let p = built.as_dyn();
        let policy = cfg.initial_policy(p, 3).unwrap();
        let nu = cfg.anchor_distribution();
        let sampling = GradientSampling::from(&cfg.stage1);
        let w = Workers::sequential();
        for rep in 0..30u64 {
            let a = surrogate_gradient(p, &cfg.kernel, &policy, &nu, &sampling, 2 * rep + 101, &w)
                .unwrap();
            let b = surrogate_gradient(p, &cfg.kernel, &policy, &nu, &sampling, 2 * rep + 102, &w)
                .unwrap();
            for i in 0..a.mean.len() {
                let se = a.std_error[i].hypot(b.std_error[i]);
                pass += usize::from((a.mean[i] - b.mean[i]).abs() <= 4.0 * se);
                total += 1;
            }
        }
    }
    let frac = pass as f64 / total as f64;
    require(
        frac >= 0.95,
        format!("{:.2}% of {total} coordinates within 4 se", 100.0 * frac),
    )
}

fn determinism(runs: &mut Runs) -> Verdict {
    let name = "case1_beta1";
    let (cfg, first) = {
        let run = runs.get(name);
        (run.cfg.clone(), run.elapsed)
    };
    let other = runs.root.path().join("workers8");
    let clock = Instant::now();
    run_case(&cfg, Some(&other), &Workers::new(8).unwrap()).unwrap();
    let elapsed = first + clock.elapsed();
    let a = snapshot(&runs.dir(name));
    let b = snapshot(&other);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let ok =
        a.len() == b.len() && differing.is_empty() && a.keys().any(|k| k.ends_with("policy.ckpt"));
    if elapsed > Duration::from_secs(10 * MIN) {
        return Err(format!(
            "{:.0} s exceeds {} s",
            elapsed.as_secs_f64(),
            10 * MIN
        ));
    }
    require(
        ok,
        format!(
            "{} files compared between 1 and 8 workers, differing: {differing:?}",
            a.len()
        ),
    )
}

fn run(n: usize, name: &str, bound: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let clock = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = clock.elapsed();
    let verdict = match (verdict, bound) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!(
            "took {:.1} s, bound {:.0} s",
            elapsed.as_secs_f64(),
            b.as_secs_f64()
        )),
        (v, _) => v,
    };
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!(
        "criterion {n:>2} {tag} {name}: {detail} [{:.1} s]",
        elapsed.as_secs_f64()
    );
    verdict.is_ok()
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let secs = Duration::from_secs;
    let mut runs = Runs::new();
    let results = [
        run(1, "kernel laws", Some(secs(1)), kernel_laws),
        run(2, "adjoint exactness", Some(secs(MIN)), adjoint_exactness),
        run(3, "costate bridge", Some(secs(10 * MIN)), bridge),
        // bench runs are computed here and timed per case below
        run(4, "stage-2 stationarity", None, || stationarity(&mut runs)),
        run(5, "case-2 accuracy", None, || case2_accuracy(&mut runs)),
        run(6, "case-1 accuracy", None, || case1_accuracy(&mut runs)),
        run(7, "case-3 accuracy", None, || case3_accuracy(&mut runs)),
        run(8, "method ordering", None, || ordering(&mut runs)),
        run(
            9,
            "residual reduction",
            Some(secs(10 * MIN)),
            residual_reduction,
        ),
        run(
            10,
            "runtime linearity",
            Some(secs(10 * MIN)),
            runtime_linearity,
        ),
        run(11, "unbiasedness", Some(secs(5 * MIN)), unbiasedness),
        run(12, "determinism", None, || determinism(&mut runs)),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

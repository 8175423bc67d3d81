#![allow(dead_code)]

use pgdpo_core::config::RunConfig;
use pgdpo_core::kernels::{DiscountKernel, ImpatienceProfile};
use pgdpo_core::policy::{Head, InputNormalization, MlpPolicy, Policy};
use pgdpo_core::problems::{make_case1_lq, make_case2_merton, make_case3_resource, ControlProblem};
use pgdpo_core::rng::{NoiseSource, NoiseStream, RecordedNoise};
use pgdpo_core::rollout::simulate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fourth-order central difference of a scalar function along `dir`.
pub fn directional(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Gradient of `f` at `x` by fourth-order central differences.
pub fn gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            directional(
                |s| {
                    y[i] = x[i] + s;
                    let v = f(&y);
                    y[i] = x[i];
                    v
                },
                h,
            )
        })
        .collect()
}

/// Jacobian (row-major `out x in`) of a vector function.
pub fn jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let n_out = f(x).len();
    let n_in = x.len();
    let mut jac = vec![0.0; n_out * n_in];
    let mut y = x.to_vec();
    for j in 0..n_in {
        let mut at = |s: f64| {
            y[j] = x[j] + s;
            let v = f(&y);
            y[j] = x[j];
            v
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        for i in 0..n_out {
            jac[i * n_in + j] = (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h);
        }
    }
    jac
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||b||, floor)`
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(floor)
}

pub struct Benchmark {
    pub name: &'static str,
    pub problem: Box<dyn ControlProblem>,
    pub kernel: DiscountKernel,
}

fn spd(n: usize, rng: &mut ChaCha8Rng) -> nalgebra::DMatrix<f64> {
    let a = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.15..0.15));
    &a * a.transpose() + nalgebra::DMatrix::identity(n, n) * 0.02
}

/// One random instance of each benchmark family.
pub fn random_benchmarks(seed: u64) -> Vec<Benchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=3);
    let target = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lq = make_case1_lq(
        target,
        rng.random_range(0.5..2.0),
        rng.random_range(0.2..1.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.1..0.4),
        1.0,
    )
    .unwrap();
    let survival = DiscountKernel::SurvivalGamma {
        alpha0: rng.random_range(0.5..2.0),
        beta0: rng.random_range(0.2..1.5),
    };
    let n = rng.random_range(1..=4);
    let excess: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.08)).collect();
    let cov = spd(n, &mut rng);
    let m2 = make_case2_merton(
        0.02,
        excess.clone(),
        cov.clone(),
        rng.random_range(0.0..0.5),
        1.0,
    )
    .unwrap();
    let hyper = DiscountKernel::Hyperbolic {
        kappa: rng.random_range(0.5..2.0),
    };
    let m3 = make_case3_resource(0.02, excess, cov, rng.random_range(0.0..0.5), 1.0).unwrap();
    let profile = match rng.random_range(0..3) {
        0 => ImpatienceProfile::default_linear(),
        1 => ImpatienceProfile::default_sinusoidal(),
        _ => ImpatienceProfile::default_exponential(),
    };
    vec![
        Benchmark {
            name: "case1",
            problem: Box::new(lq),
            kernel: survival,
        },
        Benchmark {
            name: "case2",
            problem: Box::new(m2),
            kernel: hyper,
        },
        Benchmark {
            name: "case3",
            problem: Box::new(m3),
            kernel: DiscountKernel::TimeVaryingHyperbolic { profile },
        },
    ]
}

/// Small random policy with softplus heads on positive controls.
pub fn random_policy(problem: &dyn ControlProblem, hidden: &[usize], seed: u64) -> MlpPolicy {
    let dims = problem.dims();
    let mut widths = vec![1 + dims.state];
    widths.extend_from_slice(hidden);
    widths.push(dims.control);
    let heads = problem
        .positive_controls()
        .into_iter()
        .map(|p| if p { Head::Softplus } else { Head::Identity })
        .collect();
    MlpPolicy::init(
        widths,
        heads,
        InputNormalization::identity(dims.state),
        seed,
    )
    .unwrap()
}

pub fn random_state(problem: &dyn ControlProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..problem.dims().state)
        .map(|_| rng.random_range(-0.8..0.8))
        .collect()
}

pub fn random_control(problem: &dyn ControlProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    problem
        .positive_controls()
        .into_iter()
        .map(|p| {
            if p {
                rng.random_range(0.3..1.5)
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

/// Desk-scale run that finishes in seconds.
pub fn tiny_config(mut cfg: RunConfig) -> RunConfig {
    cfg.policy.hidden = vec![8];
    cfg.stage1.iterations = 6;
    cfg.stage1.batch = 16;
    cfg.stage1.dt = 1.0 / 16.0;
    cfg.stage2.samples = 32;
    cfg.stage2.steps = 8;
    cfg.grid.times = 2;
    cfg.grid.points = 4;
    cfg.residual.every = 3;
    cfg.residual.times = 2;
    cfg.residual.points = 3;
    cfg.runtime.budgets = vec![(16, 4), (32, 8)];
    cfg.runtime.repetitions = 1;
    cfg
}

/// Drop wall-clock columns from CSV text so outputs can be compared bytewise.
pub fn strip_wall_columns(text: &str) -> String {
    use pgdpo_core::bench::WALL_TIME_COLUMNS;
    let mut drop: Vec<usize> = Vec::new();
    let mut out = String::new();
    for line in text.lines() {
        if line.starts_with('#') {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if drop.is_empty() && cells.iter().any(|c| WALL_TIME_COLUMNS.contains(c)) {
            drop = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| WALL_TIME_COLUMNS.contains(c))
                .map(|(i, _)| i)
                .collect();
        }
        let kept: Vec<&str> = cells
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, c)| *c)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

/// Every file under `root`, relative path -> bytes (CSV wall columns removed).
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        dir: &std::path::Path,
        root: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                let bytes = std::fs::read(&p).unwrap();
                let bytes = if rel.ends_with(".csv") {
                    strip_wall_columns(&String::from_utf8(bytes).unwrap()).into_bytes()
                } else {
                    bytes
                };
                out.insert(rel, bytes);
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Brownian increments of one path, recorded so a rollout can be replayed.
pub fn recorded(seed: u64, steps: usize, q: usize, dt: f64) -> RecordedNoise {
    let mut s = NoiseStream::new(seed, 0, q);
    let mut inc = vec![0.0; steps * q];
    for k in 0..steps {
        s.fill(k, dt, &mut inc[k * q..(k + 1) * q]);
    }
    RecordedNoise {
        increments: inc,
        dim: q,
    }
}

/// Anchored return of a replayed rollout.
#[allow(clippy::too_many_arguments)]
pub fn frozen_return(
    p: &dyn ControlProblem,
    pol: &dyn Policy,
    k: &DiscountKernel,
    t0: f64,
    x0: &[f64],
    dt: f64,
    steps: usize,
    noise: &RecordedNoise,
) -> f64 {
    let traj = simulate(p, pol, k, t0, x0, dt, steps, &mut noise.clone()).unwrap();
    traj.anchored_return(k, t0).unwrap()
}

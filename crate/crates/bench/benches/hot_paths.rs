use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pgdpo_bench::fixtures;
use pgdpo_core::adjoint::{mc_costate, reverse_into, reverse_pass, CostateConfig};
use pgdpo_core::rollout::{simulate, simulate_into, RolloutScratch};
use pgdpo_core::stage2::maximize_hamiltonian;
use pgdpo_core::{Policy, Trajectory, Workers};

const STEPS: usize = 64;

fn rollout(c: &mut Criterion) {
    let mut g = c.benchmark_group("rollout_64_steps");
    for f in fixtures() {
        let (t, x) = f.query();
        let dt = (f.problem().horizon() - t) / STEPS as f64;
        let mut traj = Trajectory::default();
        let mut scratch = RolloutScratch::default();
        g.bench_function(BenchmarkId::from_parameter(f.name), |b| {
            b.iter(|| {
                let mut noise = f.noise(7);
                simulate_into(
                    &mut traj,
                    &mut scratch,
                    f.problem(),
                    &f.policy,
                    &f.cfg.kernel,
                    t,
                    t,
                    &x,
                    dt,
                    STEPS,
                    &mut noise,
                )
                .unwrap();
                black_box(traj.total_return())
            })
        });
    }
    g.finish();
}

fn reverse(c: &mut Criterion) {
    let mut g = c.benchmark_group("reverse_pass_64_steps");
    for f in fixtures() {
        let (t, x) = f.query();
        let dt = (f.problem().horizon() - t) / STEPS as f64;
        let traj = simulate(
            f.problem(),
            &f.policy,
            &f.cfg.kernel,
            t,
            &x,
            dt,
            STEPS,
            &mut f.noise(7),
        )
        .unwrap();
        let mut adj = reverse_pass(&traj, Some(&f.policy)).unwrap();
        let mut buf = Vec::new();
        g.bench_function(BenchmarkId::new("with_theta", f.name), |b| {
            b.iter(|| reverse_into(black_box(&traj), Some(&f.policy), &mut adj, &mut buf).unwrap())
        });
        g.bench_function(BenchmarkId::new("costate_only", f.name), |b| {
            b.iter(|| reverse_into(black_box(&traj), None, &mut adj, &mut buf).unwrap())
        });
    }
    g.finish();
}

fn costate(c: &mut Criterion) {
    let mut g = c.benchmark_group("mc_costate_256x16");
    g.sample_size(20);
    let w = Workers::sequential();
    for f in fixtures() {
        let (t, x) = f.query();
        let cfg = CostateConfig {
            samples: 256,
            steps: 16,
            antithetic: true,
            with_z: f.problem().requires_z(),
        };
        g.bench_function(BenchmarkId::from_parameter(f.name), |b| {
            b.iter(|| {
                mc_costate(f.problem(), &f.policy, &f.cfg.kernel, t, &x, &cfg, 3, &w).unwrap()
            })
        });
    }
    g.finish();
}

fn hamiltonian(c: &mut Criterion) {
    let mut g = c.benchmark_group("maximize_hamiltonian");
    let w = Workers::sequential();
    for f in fixtures() {
        let (t, x) = f.query();
        let cfg = CostateConfig {
            samples: 256,
            steps: 16,
            antithetic: true,
            with_z: f.problem().requires_z(),
        };
        let est = mc_costate(f.problem(), &f.policy, &f.cfg.kernel, t, &x, &cfg, 3, &w).unwrap();
        let u0 = f.policy.act(t, &x).unwrap();
        g.bench_function(BenchmarkId::from_parameter(f.name), |b| {
            b.iter(|| {
                maximize_hamiltonian(
                    f.problem(),
                    &f.cfg.kernel,
                    t,
                    &x,
                    &est.lambda,
                    est.z.as_deref(),
                    &u0,
                    &f.cfg.stage2,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(hot_paths, rollout, reverse, costate, hamiltonian);
criterion_main!(hot_paths);

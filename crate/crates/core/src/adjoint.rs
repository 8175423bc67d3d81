//! Pathwise costates by an explicit reverse sweep over the rollout tape, their
//! Monte Carlo averages, the one-step `Z` regression, and the costate/BPTT
//! bridge remainder.
//!
//! With `F_k` the Euler map and `r_k = D(t0, t_k) l_k dt`, the sweep is
//!
//! ```text
//! lambda_N = D(t0, T) grad g(X_N)
//! G_k      = d_u r_k + (d_u F_k)^T lambda_{k+1}
//! lambda_k = d_x r_k + (d_x F_k)^T lambda_{k+1} + (d_x u_k)^T G_k
//! ```
//!
//! with `d_x F = I + b_x dt + sum_j sigma_x^(j) dW_j` and
//! `d_u F = b_u dt + sum_j sigma_u^(j) dW_j`. The parameter gradient is
//! `sum_k (d u_k / d theta)^T G_k`.

use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::parallel::Workers;
use crate::policy::{MlpPolicy, Policy};
use crate::problems::{ControlProblem, Dims};
use crate::rng::{mix_keys, NoiseSource, NoiseStream};
use crate::rollout::{batch_stream, simulate_into, RolloutScratch, Trajectory};
use crate::stats;

#[derive(Clone, Debug, Default)]
pub struct PathwiseAdjoint {
    pub state_dim: usize,
    pub control_dim: usize,
    /// `(N + 1) x d`
    pub lambdas: Vec<f64>,
    /// `N x m`
    pub signals: Vec<f64>,
    /// Empty unless a parameterized policy was passed to the sweep.
    pub theta_grad: Vec<f64>,
}

impl PathwiseAdjoint {
    pub fn lambda(&self, k: usize) -> &[f64] {
        &self.lambdas[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn signal(&self, k: usize) -> &[f64] {
        &self.signals[k * self.control_dim..(k + 1) * self.control_dim]
    }

    /// `dJ / dx0`.
    pub fn initial_state_gradient(&self) -> &[f64] {
        self.lambda(0)
    }
}

pub fn reverse_pass(traj: &Trajectory, policy: Option<&MlpPolicy>) -> Result<PathwiseAdjoint> {
    let mut out = PathwiseAdjoint::default();
    reverse_into(traj, policy, &mut out, &mut Vec::new())?;
    Ok(out)
}

/// Reverse sweep into reusable buffers. When `policy` is given it must be the
/// network that produced the tape; the parameter gradient is then written to
/// `out.theta_grad`.
pub fn reverse_into(
    traj: &Trajectory,
    policy: Option<&MlpPolicy>,
    out: &mut PathwiseAdjoint,
    scratch: &mut Vec<f64>,
) -> Result<()> {
    traj.check_complete()?;
    let dims = traj.dims();
    let (d, m) = (dims.state, dims.control);
    let n = traj.steps;
    let dt = traj.dt;
    out.state_dim = d;
    out.control_dim = m;
    out.lambdas.resize((n + 1) * d, 0.0);
    out.signals.resize(n * m, 0.0);
    match policy {
        Some(p) => {
            out.theta_grad.clear();
            out.theta_grad.resize(p.num_params(), 0.0);
        }
        None => out.theta_grad.clear(),
    }

    let dn = traj.discounts[n];
    for (l, g) in out.lambdas[n * d..].iter_mut().zip(&traj.terminal_gradient) {
        *l = dn * g;
    }
    for k in (0..n).rev() {
        let parts = dims.split(traj.partials_block(k));
        let disc = traj.discounts[k];
        let dw = traj.noise(k);
        let jac = traj.policy_jacobian(k);
        let (head, tail) = out.lambdas.split_at_mut((k + 1) * d);
        let next = &tail[..d];
        let cur = &mut head[k * d..];
        let g = &mut out.signals[k * m..(k + 1) * m];

        for (c, gc) in g.iter_mut().enumerate() {
            let mut acc = disc * parts.lu[c] * dt;
            for (i, li) in next.iter().enumerate() {
                let mut fu = parts.bu[i * m + c] * dt;
                for (j, w) in dw.iter().enumerate() {
                    fu += parts.su[(j * d + i) * m + c] * w;
                }
                acc += fu * li;
            }
            *gc = acc;
        }
        for (l, cl) in cur.iter_mut().enumerate() {
            let mut acc = disc * parts.lx[l] * dt + next[l];
            for (i, li) in next.iter().enumerate() {
                let mut fx = parts.bx[i * d + l] * dt;
                for (j, w) in dw.iter().enumerate() {
                    fx += parts.sx[(j * d + i) * d + l] * w;
                }
                acc += fx * li;
            }
            for (c, gc) in g.iter().enumerate() {
                acc += jac[c * d + l] * gc;
            }
            *cl = acc;
        }
        if let Some(p) = policy {
            p.backward(
                traj.times[k],
                traj.state(k),
                g,
                &mut out.theta_grad,
                None,
                scratch,
            )?;
        }
    }
    Ok(())
}

/// Sub-rollout budget for a costate query.
#[derive(Clone, Debug, PartialEq)]
pub struct CostateConfig {
    /// `M_MC`
    pub samples: usize,
    /// `N'`: steps over `[t, T]`.
    pub steps: usize,
    pub antithetic: bool,
    /// Also regress `Z` from the first step.
    pub with_z: bool,
}

impl Default for CostateConfig {
    fn default() -> Self {
        CostateConfig {
            samples: 256,
            steps: 16,
            antithetic: true,
            with_z: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostateEstimate {
    pub t: f64,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_std_error: Vec<f64>,
    /// `d x q` row-major.
    pub z: Option<Vec<f64>>,
    pub z_std_error: Option<Vec<f64>>,
    pub samples: usize,
    pub steps: usize,
}

/// Mean and standard error per column; antithetic rows are averaged in pairs
/// first so the error reflects the paired estimator.
fn paired_mean_stderr(rows: &[Vec<f64>], dim: usize, antithetic: bool) -> (Vec<f64>, Vec<f64>) {
    if antithetic && rows.len() >= 4 {
        let pairs: Vec<Vec<f64>> = rows
            .chunks(2)
            .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect();
        stats::column_mean_stderr(&pairs, dim)
    } else {
        stats::column_mean_stderr(rows, dim)
    }
}

/// Average pathwise `lambda_0` over `M_MC` sub-rollouts of `N'` steps on
/// `[t, T]`, with the kernel re-anchored at `t`.
#[allow(clippy::too_many_arguments)]
pub fn mc_costate(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    kernel: &DiscountKernel,
    t: f64,
    x: &[f64],
    cfg: &CostateConfig,
    seed: u64,
    workers: &Workers,
) -> Result<CostateEstimate> {
    let horizon = problem.horizon();
    if !(t.is_finite() && t < horizon) {
        return Err(Error::domain(format!(
            "costate query at t = {t} needs t < T = {horizon}; use grad g at the horizon"
        )));
    }
    if cfg.samples == 0 || cfg.steps == 0 {
        return Err(Error::InvalidParameter("M_MC and N' must be >= 1".into()));
    }
    if cfg.antithetic && !cfg.samples.is_multiple_of(2) {
        return Err(Error::InvalidParameter(
            "antithetic costate needs an even M_MC".into(),
        ));
    }
    let dims = problem.dims();
    let (d, q) = (dims.state, dims.noise);
    let dt = (horizon - t) / cfg.steps as f64;
    let rows = workers.map_init(
        cfg.samples,
        || {
            (
                Trajectory::default(),
                RolloutScratch::default(),
                PathwiseAdjoint::default(),
                Vec::new(),
            )
        },
        |(traj, scratch, adj, rev), j| -> Result<Vec<f64>> {
            let mut noise = batch_stream(seed, j, q, cfg.antithetic);
            simulate_into(
                traj, scratch, problem, policy, kernel, t, t, x, dt, cfg.steps, &mut noise,
            )
            .map_err(|e| e.with_path(j))?;
            reverse_into(traj, None, adj, rev)?;
            let mut row = adj.lambda(0).to_vec();
            if cfg.with_z {
                z_row(adj.lambda(1), traj.noise(0), dt, &mut row);
            }
            Ok(row)
        },
    );
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let width = if cfg.with_z { d + d * q } else { d };
    let (mean, se) = paired_mean_stderr(&rows, width, cfg.antithetic);
    let (z, z_se) = if cfg.with_z {
        (Some(mean[d..].to_vec()), Some(se[d..].to_vec()))
    } else {
        (None, None)
    };
    Ok(CostateEstimate {
        t,
        x: x.to_vec(),
        lambda: mean[..d].to_vec(),
        lambda_std_error: se[..d].to_vec(),
        z,
        z_std_error: z_se,
        samples: cfg.samples,
        steps: cfg.steps,
    })
}

/// Append `lambda_1 dW_0^T / dt` (row-major `d x q`) to `row`.
fn z_row(lambda1: &[f64], dw0: &[f64], dt: f64, row: &mut Vec<f64>) {
    for li in lambda1 {
        for w in dw0 {
            row.push(li * w / dt);
        }
    }
}

/// `Z(t, x) ~ E[lambda_1 dW_0^T] / dt` over anchored sub-rollouts. Returns the
/// estimate and its per-entry standard error.
#[allow(clippy::too_many_arguments)]
pub fn estimate_z(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    kernel: &DiscountKernel,
    t: f64,
    x: &[f64],
    cfg: &CostateConfig,
    seed: u64,
    workers: &Workers,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = CostateConfig {
        with_z: true,
        ..cfg.clone()
    };
    let est = mc_costate(problem, policy, kernel, t, x, &cfg, seed, workers)?;
    Ok((est.z.unwrap(), est.z_std_error.unwrap()))
}

/// Regress `Z` from recorded first-step costates and increments.
pub fn z_regression(lambda1: &[Vec<f64>], dw0: &[Vec<f64>], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let d = lambda1.first().map_or(0, Vec::len);
    let q = dw0.first().map_or(0, Vec::len);
    let rows: Vec<Vec<f64>> = lambda1
        .iter()
        .zip(dw0)
        .map(|(l, w)| {
            let mut row = Vec::with_capacity(d * q);
            z_row(l, w, dt, &mut row);
            row
        })
        .collect();
    stats::column_mean_stderr(&rows, d * q)
}

/// Setup of the costate/BPTT bridge experiment.
///
/// A prefix path is simulated from `(anchor_time, x0)` to `prefix_time` on
/// the fine grid; `branches` continuations are then simulated on the fine grid
/// to `T` and swept backwards once. For each coarse step `dt` (a multiple of
/// `fine_dt`) the conditional costates `lambda_k`, `lambda_{k+1|k}` and `Z_k`
/// are read from the fine sweep at `t_k` and `t_k + dt`, and `dW_0` is the sum
/// of the fine increments over the first coarse step. Every coarse step shares
/// the same prefix and branches.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeConfig {
    pub anchor_time: f64,
    pub x0: Vec<f64>,
    pub prefix_time: f64,
    pub step_sizes: Vec<f64>,
    pub fine_dt: f64,
    /// `M_inner`
    pub branches: usize,
    pub antithetic: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeComponents {
    pub dt: f64,
    /// Prefix index `k` on the coarse grid.
    pub k: usize,
    pub lambda_k: Vec<f64>,
    pub lambda_next: Vec<f64>,
    pub z: Vec<f64>,
    pub dx_h: Vec<f64>,
    pub r_foc: Vec<f64>,
    pub c_foc: Vec<f64>,
    pub rho: Vec<f64>,
    pub rho_std_error: Vec<f64>,
    pub rho_norm: f64,
    /// Euclidean norm of the per-coordinate standard errors of `rho`.
    pub std_error: f64,
    /// Standard error larger than `|rho|`.
    pub inconclusive: bool,
}

impl BridgeComponents {
    pub fn normalized(&self) -> f64 {
        self.rho_norm / self.dt
    }

    pub fn r_foc_norm(&self) -> f64 {
        norm2(&self.r_foc)
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn grid_steps(span: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (span / dt).round();
    if !(n >= 0.0) || (n * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::domain(format!(
            "{what}: {span} is not a multiple of {dt}"
        )));
    }
    Ok(n as usize)
}

/// Remainder `rho_k = lambda_k - lambda_{k+1|k} - (D^x_k + C^FOC_k) dt` of
/// the one-step costate identity, for every coarse step in `cfg.step_sizes`.
pub fn bridge_residual(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    kernel: &DiscountKernel,
    cfg: &BridgeConfig,
    workers: &Workers,
) -> Result<Vec<BridgeComponents>> {
    let dims = problem.dims();
    let (d, m, q) = (dims.state, dims.control, dims.noise);
    let horizon = problem.horizon();
    if cfg.branches < 2 || (cfg.antithetic && !cfg.branches.is_multiple_of(2)) {
        return Err(Error::InvalidParameter(
            "bridge needs >= 2 branches (an even count when antithetic)".into(),
        ));
    }
    if !(cfg.anchor_time <= cfg.prefix_time && cfg.prefix_time < horizon) {
        return Err(Error::domain("bridge needs anchor <= prefix time < T"));
    }
    let prefix_steps = grid_steps(cfg.prefix_time - cfg.anchor_time, cfg.fine_dt, "prefix")?;
    let branch_steps = grid_steps(horizon - cfg.prefix_time, cfg.fine_dt, "continuation")?;
    let mut factors = Vec::with_capacity(cfg.step_sizes.len());
    for &dt in &cfg.step_sizes {
        let f = grid_steps(dt, cfg.fine_dt, "coarse step")?;
        if f == 0 || f > branch_steps {
            return Err(Error::domain(format!(
                "coarse step {dt} does not fit the continuation"
            )));
        }
        factors.push(f);
    }

    // prefix on the fine grid, shared by every coarse step
    let mut x = cfg.x0.clone();
    let mut prefix_noise = NoiseStream::new(mix_keys(&[cfg.seed, 0x7072_6566]), 0, q);
    let mut u = vec![0.0; m];
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d * q];
    let mut dw = vec![0.0; q];
    let mut pscratch = Vec::new();
    for i in 0..prefix_steps {
        let t = cfg.anchor_time + i as f64 * cfg.fine_dt;
        policy.evaluate(t, &x, &mut u, None, &mut pscratch)?;
        problem.drift(t, &x, &u, &mut drift);
        problem.diffusion(t, &x, &u, &mut diff);
        prefix_noise.fill(i, cfg.fine_dt, &mut dw);
        for r in 0..d {
            let mut v = x[r] + drift[r] * cfg.fine_dt;
            for j in 0..q {
                v += diff[r * q + j] * dw[j];
            }
            x[r] = v;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: i,
                path: None,
            });
        }
    }
    let tk = cfg.prefix_time;

    // each branch yields lambda(t_k), then (lambda(t_k + dt), dW_0) per coarse step
    let branch_seed = mix_keys(&[cfg.seed, 0x6272_616e]);
    let per_branch = workers.map_init(
        cfg.branches,
        || {
            (
                Trajectory::default(),
                RolloutScratch::default(),
                PathwiseAdjoint::default(),
                Vec::new(),
            )
        },
        |(traj, scratch, adj, rev), b| -> Result<Vec<f64>> {
            let mut noise = batch_stream(branch_seed, b, q, cfg.antithetic);
            simulate_into(
                traj,
                scratch,
                problem,
                policy,
                kernel,
                cfg.anchor_time,
                tk,
                &x,
                cfg.fine_dt,
                branch_steps,
                &mut noise,
            )
            .map_err(|e| e.with_path(b))?;
            reverse_into(traj, None, adj, rev)?;
            let mut row = adj.lambda(0).to_vec();
            for &f in &factors {
                row.extend_from_slice(adj.lambda(f));
                for j in 0..q {
                    let mut acc = 0.0;
                    for s in 0..f {
                        acc += traj.noise(s)[j];
                    }
                    row.push(acc);
                }
            }
            Ok(row)
        },
    );
    let rows = per_branch.into_iter().collect::<Result<Vec<_>>>()?;

    // Hamiltonian partials at (t_k, X_k, u_k) with the policy Jacobian
    let mut jac = vec![0.0; m * d];
    policy.evaluate(tk, &x, &mut u, Some(&mut jac), &mut pscratch)?;
    let mut block = vec![0.0; dims.partials_len()];
    problem.partials(tk, &x, &u, dims.split_mut(&mut block));
    let parts = dims.split(&block);
    let disc = kernel.factor(cfg.anchor_time, tk);

    let mut out = Vec::with_capacity(factors.len());
    for (idx, &dt) in cfg.step_sizes.iter().enumerate() {
        let off = d + idx * (d + q);
        // per-branch rho; it is linear in the branch quantities, so its mean is rho
        let samples: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let l0 = &row[..d];
                let l1 = &row[off..off + d];
                let w0 = &row[off + d..off + d + q];
                let mut zb = Vec::with_capacity(d * q);
                z_row(l1, w0, dt, &mut zb);
                let mut values = Vec::with_capacity(4 * d + d * q);
                let (dx_h, _, c_foc) = hamiltonian_partials(dims, &parts, disc, &jac, l1, &zb);
                for l in 0..d {
                    values.push(l0[l] - l1[l] - (dx_h[l] + c_foc[l]) * dt);
                }
                values.extend_from_slice(l0);
                values.extend_from_slice(l1);
                values.extend_from_slice(&zb);
                values
            })
            .collect();
        let width = 3 * d + d * q;
        let (mean, se) = paired_mean_stderr(&samples, width, cfg.antithetic);
        let rho = mean[..d].to_vec();
        let lambda_k = mean[d..2 * d].to_vec();
        let lambda_next = mean[2 * d..3 * d].to_vec();
        let z = mean[3 * d..].to_vec();
        let (dx_h, r_foc, c_foc) = hamiltonian_partials(dims, &parts, disc, &jac, &lambda_next, &z);
        let rho_se = se[..d].to_vec();
        let rho_norm = norm2(&rho);
        let std_error = norm2(&rho_se);
        let k = grid_steps(tk - cfg.anchor_time, dt, "prefix on coarse grid").unwrap_or(usize::MAX);
        out.push(BridgeComponents {
            dt,
            k,
            lambda_k,
            lambda_next,
            z,
            dx_h,
            r_foc,
            c_foc,
            rho,
            rho_std_error: rho_se,
            rho_norm,
            std_error,
            inconclusive: std_error > rho_norm,
        });
    }
    Ok(out)
}

/// `(d_x H, d_u H, (d_u H)^T d_x u)` at one tape point for plug-ins `(p, Z)`.
fn hamiltonian_partials(
    dims: Dims,
    parts: &crate::problems::Partials<'_>,
    disc: f64,
    jac: &[f64],
    p: &[f64],
    z: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d, m, q) = (dims.state, dims.control, dims.noise);
    let mut dx = vec![0.0; d];
    for (l, o) in dx.iter_mut().enumerate() {
        let mut acc = disc * parts.lx[l];
        for i in 0..d {
            acc += parts.bx[i * d + l] * p[i];
            for j in 0..q {
                acc += parts.sx[(j * d + i) * d + l] * z[i * q + j];
            }
        }
        *o = acc;
    }
    let mut du = vec![0.0; m];
    for (c, o) in du.iter_mut().enumerate() {
        let mut acc = disc * parts.lu[c];
        for i in 0..d {
            acc += parts.bu[i * m + c] * p[i];
            for j in 0..q {
                acc += parts.su[(j * d + i) * m + c] * z[i * q + j];
            }
        }
        *o = acc;
    }
    let mut cf = vec![0.0; d];
    for (l, o) in cf.iter_mut().enumerate() {
        *o = (0..m).map(|c| du[c] * jac[c * d + l]).sum();
    }
    (dx, du, cf)
}

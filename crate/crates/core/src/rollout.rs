//! Euler-Maruyama rollouts with a full tape, and the anchored discrete return
//! `J = sum_k D(t0, t_k) l(t_k, X_k, u_k) dt + D(t0, T) g(X_N)`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::parallel::Workers;
use crate::policy::Policy;
use crate::problems::{ControlProblem, Dims};
use crate::rng::{NoiseSource, NoiseStream};
use crate::stats;

/// Tolerance on `start + N dt = T`.
pub const HORIZON_MATCH_TOL: f64 = 1e-9;

/// Tape of one rollout. Arrays indexed by step `k` are flat row-major.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub dims: Option<Dims>,
    /// Evaluation time of the discount kernel, `D(anchor_time, .)`.
    pub anchor_time: f64,
    pub start_time: f64,
    pub dt: f64,
    pub steps: usize,
    /// `N + 1` times `t_k = start + k dt`.
    pub times: Vec<f64>,
    /// `(N + 1) x d`
    pub states: Vec<f64>,
    /// `N x m`
    pub controls: Vec<f64>,
    /// `N x q`
    pub noises: Vec<f64>,
    /// Undiscounted running rewards `l_k`.
    pub running: Vec<f64>,
    /// `D(anchor, t_k)` for `k = 0..=N`; the last entry is `D(anchor, T)`.
    pub discounts: Vec<f64>,
    /// `D(anchor, t_k) l_k dt`
    pub rewards: Vec<f64>,
    pub terminal_value: f64,
    /// `D(anchor, T) g(X_N)`
    pub terminal_reward: f64,
    pub terminal_gradient: Vec<f64>,
    /// `N` blocks of [`Dims::partials_len`] first partials.
    pub partials: Vec<f64>,
    /// `N` blocks of the `m x d` policy Jacobian.
    pub policy_jacobians: Vec<f64>,
}

impl Trajectory {
    pub fn dims(&self) -> Dims {
        self.dims.expect("trajectory not populated")
    }

    pub fn state(&self, k: usize) -> &[f64] {
        let d = self.dims().state;
        &self.states[k * d..(k + 1) * d]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        let m = self.dims().control;
        &self.controls[k * m..(k + 1) * m]
    }

    pub fn noise(&self, k: usize) -> &[f64] {
        let q = self.dims().noise;
        &self.noises[k * q..(k + 1) * q]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.steps)
    }

    pub fn partials_block(&self, k: usize) -> &[f64] {
        let len = self.dims().partials_len();
        &self.partials[k * len..(k + 1) * len]
    }

    pub fn policy_jacobian(&self, k: usize) -> &[f64] {
        let dims = self.dims();
        let len = dims.control * dims.state;
        &self.policy_jacobians[k * len..(k + 1) * len]
    }

    /// Sum of the stored per-step rewards plus the terminal reward, in step order.
    pub fn total_return(&self) -> f64 {
        let mut acc = 0.0;
        for r in &self.rewards {
            acc += r;
        }
        acc + self.terminal_reward
    }

    /// Check that every array the reverse pass reads is present.
    pub fn check_complete(&self) -> Result<()> {
        let Some(dims) = self.dims else {
            return Err(Error::Contract("trajectory has no dimensions".into()));
        };
        let n = self.steps;
        let checks = [
            ("times", self.times.len(), n + 1),
            ("states", self.states.len(), (n + 1) * dims.state),
            ("controls", self.controls.len(), n * dims.control),
            ("noises", self.noises.len(), n * dims.noise),
            ("discounts", self.discounts.len(), n + 1),
            ("rewards", self.rewards.len(), n),
            (
                "terminal_gradient",
                self.terminal_gradient.len(),
                dims.state,
            ),
            ("partials", self.partials.len(), n * dims.partials_len()),
            (
                "policy_jacobians",
                self.policy_jacobians.len(),
                n * dims.control * dims.state,
            ),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Contract(format!(
                    "tape entry `{name}` has {got} values, expected {want}"
                )));
            }
        }
        Ok(())
    }

    /// Recompute the anchored return from the stored undiscounted rewards.
    /// Bitwise equal to [`Self::total_return`] when `kernel` and `anchor_time`
    /// are the ones the trajectory was simulated with.
    pub fn anchored_return(&self, kernel: &DiscountKernel, anchor_time: f64) -> Result<f64> {
        if anchor_time != self.anchor_time {
            return Err(Error::domain(format!(
                "trajectory anchored at {} queried at {anchor_time}",
                self.anchor_time
            )));
        }
        let mut acc = 0.0;
        for k in 0..self.steps {
            acc += kernel.factor(anchor_time, self.times[k]) * self.running[k] * self.dt;
        }
        let end = self.times[self.steps];
        Ok(acc + kernel.factor(anchor_time, end) * self.terminal_value)
    }
}

/// Per-worker buffers reused across rollouts.
#[derive(Default)]
pub struct RolloutScratch {
    pub policy: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

/// Roll out from `(start_time, x0)` with `D(anchor_time, .)` discounting.
#[allow(clippy::too_many_arguments)]
pub fn simulate_into(
    traj: &mut Trajectory,
    scratch: &mut RolloutScratch,
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    kernel: &DiscountKernel,
    anchor_time: f64,
    start_time: f64,
    x0: &[f64],
    dt: f64,
    steps: usize,
    noise: &mut dyn NoiseSource,
) -> Result<()> {
    let dims = problem.dims();
    let (d, m, q) = (dims.state, dims.control, dims.noise);
    let horizon = problem.horizon();
    if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(
            "initial state must be finite with the problem dimension",
        ));
    }
    if policy.state_dim() != d || policy.control_dim() != m {
        return Err(Error::Contract(format!(
            "policy maps R^{} -> R^{}, problem needs R^{d} -> R^{m}",
            policy.state_dim(),
            policy.control_dim()
        )));
    }
    if !(dt > 0.0) || (start_time + steps as f64 * dt - horizon).abs() > HORIZON_MATCH_TOL {
        return Err(Error::domain(format!(
            "start {start_time} + {steps} x {dt} does not reach T = {horizon}"
        )));
    }
    if anchor_time > start_time {
        return Err(Error::domain("anchor time after rollout start"));
    }
    let plen = dims.partials_len();
    traj.dims = Some(dims);
    traj.anchor_time = anchor_time;
    traj.start_time = start_time;
    traj.dt = dt;
    traj.steps = steps;
    let n = steps;
    traj.times.clear();
    traj.times
        .extend((0..=n).map(|k| start_time + k as f64 * dt));
    traj.states.resize((n + 1) * d, 0.0);
    traj.controls.resize(n * m, 0.0);
    traj.noises.resize(n * q, 0.0);
    traj.running.resize(n, 0.0);
    traj.discounts.resize(n + 1, 0.0);
    traj.rewards.resize(n, 0.0);
    traj.terminal_gradient.resize(d, 0.0);
    traj.partials.resize(n * plen, 0.0);
    traj.policy_jacobians.resize(n * m * d, 0.0);
    scratch.drift.resize(d, 0.0);
    scratch.diffusion.resize(d * q, 0.0);

    traj.states[..d].copy_from_slice(x0);
    for k in 0..n {
        let t = traj.times[k];
        let (past, future) = traj.states.split_at_mut((k + 1) * d);
        let x = &past[k * d..];
        let u = &mut traj.controls[k * m..(k + 1) * m];
        let jac = &mut traj.policy_jacobians[k * m * d..(k + 1) * m * d];
        policy.evaluate(t, x, u, Some(jac), &mut scratch.policy)?;
        let dw = &mut traj.noises[k * q..(k + 1) * q];
        noise.fill(k, dt, dw);

        let ell = problem.running_reward(t, x, u);
        let disc = kernel.factor(anchor_time, t);
        traj.running[k] = ell;
        traj.discounts[k] = disc;
        traj.rewards[k] = disc * ell * dt;
        problem.partials(
            t,
            x,
            u,
            dims.split_mut(&mut traj.partials[k * plen..(k + 1) * plen]),
        );

        problem.drift(t, x, u, &mut scratch.drift);
        problem.diffusion(t, x, u, &mut scratch.diffusion);
        let next = &mut future[..d];
        for i in 0..d {
            let mut v = x[i] + scratch.drift[i] * dt;
            let row = &scratch.diffusion[i * q..(i + 1) * q];
            for (s, w) in row.iter().zip(dw.iter()) {
                v += s * w;
            }
            next[i] = v;
        }
        if !next.iter().all(|v| v.is_finite()) || !ell.is_finite() {
            return Err(Error::Diverged {
                step: k,
                path: None,
            });
        }
    }
    let xn = &traj.states[n * d..];
    traj.terminal_value = problem.terminal_reward(xn);
    let end = traj.times[n];
    traj.discounts[n] = kernel.factor(anchor_time, end);
    traj.terminal_reward = traj.discounts[n] * traj.terminal_value;
    problem.terminal_gradient(xn, &mut traj.terminal_gradient);
    if !traj.terminal_value.is_finite() {
        return Err(Error::Diverged {
            step: n,
            path: None,
        });
    }
    Ok(())
}

/// Roll out from the anchor `(t0, x0)` over `[t0, T]`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    kernel: &DiscountKernel,
    t0: f64,
    x0: &[f64],
    dt: f64,
    steps: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    simulate_into(
        &mut traj,
        &mut RolloutScratch::default(),
        problem,
        policy,
        kernel,
        t0,
        t0,
        x0,
        dt,
        steps,
        noise,
    )?;
    Ok(traj)
}

/// Noise stream for path `j` of a batch: antithetic batches pair paths
/// `(2i, 2i+1)` on stream `i` with opposite signs.
pub fn batch_stream(seed: u64, path: usize, dim: usize, antithetic: bool) -> NoiseStream {
    if antithetic {
        let s = NoiseStream::new(seed, (path / 2) as u64, dim);
        if path % 2 == 1 {
            s.antithetic()
        } else {
            s
        }
    } else {
        NoiseStream::new(seed, path as u64, dim)
    }
}

pub struct BatchRollout {
    pub trajectories: Vec<Trajectory>,
    pub mean_return: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    problem: &dyn ControlProblem,
    policy: &dyn Policy,
    kernel: &DiscountKernel,
    t0: f64,
    x0: &[f64],
    dt: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    antithetic: bool,
    workers: &Workers,
) -> Result<BatchRollout> {
    if paths == 0 {
        return Err(Error::InvalidParameter(
            "batch needs at least one path".into(),
        ));
    }
    if antithetic && !paths.is_multiple_of(2) {
        return Err(Error::InvalidParameter(
            "antithetic batches need an even path count".into(),
        ));
    }
    let q = problem.dims().noise;
    let results = workers.map(paths, |j| {
        let mut noise = batch_stream(seed, j, q, antithetic);
        simulate(problem, policy, kernel, t0, x0, dt, steps, &mut noise).map_err(|e| e.with_path(j))
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = trajectories.iter().map(Trajectory::total_return).collect();
    Ok(BatchRollout {
        mean_return: stats::mean(&returns),
        trajectories,
    })
}

/// Debug dump: `path,k,t,X_1..X_d,u_1..u_m,reward_k` (the terminal row carries
/// the discounted terminal reward and empty controls).
pub fn write_trajectories_csv(
    w: &mut impl Write,
    trajectories: &[Trajectory],
    comment: &str,
) -> Result<()> {
    use crate::output::fmt_f64;
    let Some(first) = trajectories.first() else {
        return Ok(());
    };
    let dims = first.dims();
    writeln!(w, "# {comment}")?;
    let mut header = vec!["path".to_string(), "k".into(), "t".into()];
    header.extend((1..=dims.state).map(|i| format!("X_{i}")));
    header.extend((1..=dims.control).map(|i| format!("u_{i}")));
    header.push("reward_k".into());
    writeln!(w, "{}", header.join(","))?;
    for (p, traj) in trajectories.iter().enumerate() {
        for k in 0..=traj.steps {
            let mut row = vec![p.to_string(), k.to_string(), fmt_f64(traj.times[k])];
            row.extend(traj.state(k).iter().map(|v| fmt_f64(*v)));
            if k < traj.steps {
                row.extend(traj.control(k).iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(traj.rewards[k]));
            } else {
                row.extend(std::iter::repeat_n(String::new(), dims.control));
                row.push(fmt_f64(traj.terminal_reward));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

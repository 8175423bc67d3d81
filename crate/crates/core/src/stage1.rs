//! Rollout warm start: Adam ascent on the random-anchor surrogate
//! `E_{(t0, x0) ~ nu} J(t0, x0; theta)` with pathwise gradients from the
//! reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{reverse_into, PathwiseAdjoint};
use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::parallel::Workers;
use crate::policy::{MlpPolicy, Policy};
use crate::problems::ControlProblem;
use crate::rng::{mix_keys, NoiseStream, RefinedNoise};
use crate::rollout::{batch_stream, simulate_into, RolloutScratch, Trajectory};
use crate::stats;

/// How anchor times are drawn. Uniform anchors are snapped to the training
/// grid `{0, dt, ..., T - dt}` so every rollout ends exactly at `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorTime {
    Fixed,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorDistribution {
    pub time: AnchorTime,
    /// Anchor time used when `time = fixed`.
    #[serde(default)]
    pub fixed_time: f64,
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
}

impl AnchorDistribution {
    pub fn validate(&self, state_dim: usize, horizon: f64) -> Result<()> {
        if self.state_lo.len() != state_dim || self.state_hi.len() != state_dim {
            return Err(Error::config(
                "state_lo",
                format!("anchor box must have {state_dim} coordinates"),
            ));
        }
        if self
            .state_lo
            .iter()
            .zip(&self.state_hi)
            .any(|(a, b)| !(a <= b))
        {
            return Err(Error::config("state_lo", "anchor box has lo > hi"));
        }
        if !(self.fixed_time >= 0.0 && self.fixed_time < horizon) {
            return Err(Error::config("fixed_time", "must lie in [0, T)"));
        }
        Ok(())
    }

    /// Draw `(t0, x0, steps)` for step size `dt`.
    pub fn sample(&self, rng: &mut impl Rng, horizon: f64, dt: f64) -> (f64, Vec<f64>, usize) {
        let n = (horizon / dt).round() as usize;
        let first = match self.time {
            AnchorTime::Fixed => (self.fixed_time / dt).round() as usize,
            AnchorTime::Uniform => rng.random_range(0..n),
        };
        let x = self
            .state_lo
            .iter()
            .zip(&self.state_hi)
            .map(|(&lo, &hi)| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect();
        (first as f64 * dt, x, n - first)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `K0`
    pub iterations: usize,
    /// `M`
    pub batch: usize,
    pub dt: f64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub antithetic: bool,
    /// Combine `2 J(dt/2) - J(dt)` on shared noise.
    pub richardson: bool,
    pub max_skip_fraction: f64,
    /// Track an EMA baseline of the batch return and report the centred
    /// return. The pathwise gradient of a constant baseline is zero, so the
    /// ascent direction is unchanged.
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch: 256,
            dt: 1.0 / 64.0,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            antithetic: true,
            richardson: false,
            max_skip_fraction: 0.1,
            baseline: false,
        }
    }
}

impl TrainConfig {
    /// Errors carry the offending field as a config path.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(f, m));
        if self.batch == 0 {
            return bad("batch", "must be >= 1");
        }
        if self.antithetic && !self.batch.is_multiple_of(2) {
            return bad("batch", "antithetic batches need an even size");
        }
        if !(self.dt > 0.0) || ((horizon / self.dt).round() * self.dt - horizon).abs() > 1e-9 {
            return bad("dt", "must divide the horizon");
        }
        for (f, v) in [("lr", self.lr), ("clip", self.clip), ("eps", self.eps)] {
            if !(v > 0.0) {
                return bad(f, "must be > 0");
            }
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(f, "must lie in [0, 1)");
            }
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return bad("max_skip_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }

    fn learning_rate(&self, iter: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = iter as f64 / self.iterations.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Batch estimate of the surrogate gradient.
#[derive(Clone, Debug)]
pub struct SurrogateGradient {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub mean_return: f64,
}

/// Sampling options for [`surrogate_gradient`].
#[derive(Clone, Copy, Debug)]
pub struct GradientSampling {
    pub batch: usize,
    pub dt: f64,
    pub antithetic: bool,
    pub richardson: bool,
}

impl From<&TrainConfig> for GradientSampling {
    fn from(c: &TrainConfig) -> Self {
        GradientSampling {
            batch: c.batch,
            dt: c.dt,
            antithetic: c.antithetic,
            richardson: c.richardson,
        }
    }
}

struct PathBuffers {
    traj: Trajectory,
    scratch: RolloutScratch,
    adj: PathwiseAdjoint,
    rev: Vec<f64>,
}

impl PathBuffers {
    fn new() -> Self {
        PathBuffers {
            traj: Trajectory::default(),
            scratch: RolloutScratch::default(),
            adj: PathwiseAdjoint::default(),
            rev: Vec::new(),
        }
    }
}

/// One path: `(dJ/dtheta, J)`.
#[allow(clippy::too_many_arguments)]
fn path_gradient(
    buf: &mut PathBuffers,
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    policy: &MlpPolicy,
    nu: &AnchorDistribution,
    s: &GradientSampling,
    seed: u64,
    j: usize,
) -> Result<(Vec<f64>, f64)> {
    let q = problem.dims().noise;
    let horizon = problem.horizon();
    // antithetic partners share their anchor
    let anchor_key = if s.antithetic { j / 2 } else { j };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_keys(&[seed, 0x616e_6368, anchor_key as u64]));
    let (t0, x0, steps) = nu.sample(&mut rng, horizon, s.dt);
    let noise_seed = mix_keys(&[seed, 0x6e6f_6973]);
    let stream = batch_stream(noise_seed, j, q, s.antithetic);
    let mut run = |dt: f64,
                   steps: usize,
                   noise: &mut dyn crate::rng::NoiseSource|
     -> Result<(Vec<f64>, f64)> {
        simulate_into(
            &mut buf.traj,
            &mut buf.scratch,
            problem,
            policy,
            kernel,
            t0,
            t0,
            &x0,
            dt,
            steps,
            noise,
        )
        .map_err(|e| e.with_path(j))?;
        reverse_into(&buf.traj, Some(policy), &mut buf.adj, &mut buf.rev)?;
        Ok((buf.adj.theta_grad.clone(), buf.traj.total_return()))
    };
    if s.richardson {
        let (gf, jf) = run(s.dt / 2.0, 2 * steps, &mut stream.clone())?;
        let (gc, jc) = run(s.dt, steps, &mut RefinedNoise::new(stream, 2))?;
        let g = gf.iter().zip(&gc).map(|(a, b)| 2.0 * a - b).collect();
        Ok((g, 2.0 * jf - jc))
    } else {
        let mut noise: NoiseStream = stream;
        run(s.dt, steps, &mut noise)
    }
}

/// Mean and per-coordinate standard error of `dJ/dtheta` over `M` anchored
/// paths with i.i.d. anchors `~ nu`.
pub fn surrogate_gradient(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    policy: &MlpPolicy,
    nu: &AnchorDistribution,
    sampling: &GradientSampling,
    seed: u64,
    workers: &Workers,
) -> Result<SurrogateGradient> {
    if sampling.batch < 2 {
        return Err(Error::InvalidParameter(
            "gradient batch must be >= 2".into(),
        ));
    }
    if sampling.antithetic && !sampling.batch.is_multiple_of(2) {
        return Err(Error::InvalidParameter(
            "antithetic batches need an even size".into(),
        ));
    }
    let results = workers.map_init(sampling.batch, PathBuffers::new, |buf, j| {
        path_gradient(buf, problem, kernel, policy, nu, sampling, seed, j)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let p = policy.num_params();
    let (grads, returns): (Vec<Vec<f64>>, Vec<f64>) = results.into_iter().unzip();
    let (mean, std_error) = if sampling.antithetic {
        let pairs: Vec<Vec<f64>> = grads
            .chunks(2)
            .map(|c| c[0].iter().zip(&c[1]).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect();
        stats::column_mean_stderr(&pairs, p)
    } else {
        stats::column_mean_stderr(&grads, p)
    };
    Ok(SurrogateGradient {
        mean,
        std_error,
        mean_return: stats::mean(&returns),
    })
}

/// Scale `g` in place so its Euclidean norm is at most `clip`; returns the
/// norm before clipping.
pub fn clip_gradient(g: &mut [f64], clip: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Ascent step along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub mean_return: f64,
    pub grad_norm: f64,
    pub skips: usize,
    /// Centred return `J - b` when the baseline is on.
    pub centred_return: Option<f64>,
}

const BASELINE_DECAY: f64 = 0.98;
const BASELINE_CLIP: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: MlpPolicy,
    pub trace: Vec<TraceRow>,
    pub skipped: usize,
}

/// Run `K0` Adam ascent steps. `observer` sees the policy before every
/// iteration and once after the last one.
pub fn warm_start(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    policy: MlpPolicy,
    nu: &AnchorDistribution,
    cfg: &TrainConfig,
    seed: u64,
    workers: &Workers,
    mut observer: Option<&mut dyn FnMut(usize, &MlpPolicy) -> Result<()>>,
) -> Result<TrainOutcome> {
    let dims = problem.dims();
    cfg.validate(problem.horizon())?;
    nu.validate(dims.state, problem.horizon())?;
    if policy.state_dim() != dims.state || policy.control_dim() != dims.control {
        return Err(Error::Contract(format!(
            "policy maps R^{} -> R^{}, problem needs R^{} -> R^{}",
            policy.state_dim(),
            policy.control_dim(),
            dims.state,
            dims.control
        )));
    }
    let mut policy = policy;
    let mut adam = Adam::new(policy.num_params(), cfg.beta1, cfg.beta2, cfg.eps);
    let sampling = GradientSampling::from(cfg);
    let budget = (cfg.max_skip_fraction * cfg.iterations as f64).floor() as usize;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    let mut baseline: Option<f64> = None;
    for iter in 0..cfg.iterations {
        if let Some(obs) = observer.as_deref_mut() {
            obs(iter, &policy)?;
        }
        let iter_seed = mix_keys(&[seed, iter as u64]);
        match surrogate_gradient(problem, kernel, &policy, nu, &sampling, iter_seed, workers) {
            Ok(est) => {
                let mut g = est.mean;
                let grad_norm = clip_gradient(&mut g, cfg.clip);
                adam.ascend(policy.params_mut(), &g, cfg.learning_rate(iter));
                let centred_return = cfg.baseline.then(|| {
                    let b = baseline.unwrap_or(est.mean_return);
                    let c = (est.mean_return - b).clamp(-BASELINE_CLIP, BASELINE_CLIP);
                    baseline = Some(BASELINE_DECAY * b + (1.0 - BASELINE_DECAY) * est.mean_return);
                    c
                });
                trace.push(TraceRow {
                    iter,
                    mean_return: est.mean_return,
                    grad_norm,
                    skips: skipped,
                    centred_return,
                });
            }
            Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
                skipped += 1;
                log::warn!("iteration {iter} skipped: {e}");
                trace.push(TraceRow {
                    iter,
                    mean_return: f64::NAN,
                    grad_norm: f64::NAN,
                    skips: skipped,
                    centred_return: None,
                });
                if skipped > budget {
                    return Err(Error::TrainingAborted {
                        skipped,
                        attempted: iter + 1,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(obs) = observer {
        obs(cfg.iterations, &policy)?;
    }
    Ok(TrainOutcome {
        policy,
        trace,
        skipped,
    })
}

//! Reference controls.
//!
//! Case 1 uses the Riccati solution of the target-tracking problem under a
//! multiplicative kernel with hazard `delta(t)`:
//! `P' = delta P - q_s + P^2 / r_u`, `P(T) = q_T`, `u* = -(P / r_u)(x - x*)`.
//!
//! Cases 2 and 3 use the log-utility candidate equilibrium
//! `pi* = Sigma^{-1}(mu - r)`, `c* = 1 / (int_t^T D(t, s) ds + eps D(t, T))`,
//! checked through the diagonal stationarity residual rather than trusted.

use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::parallel::Workers;
use crate::policy::Policy;
use crate::problems::{ControlProblem, LogMerton, TargetLq};
use crate::stage2::{residual_field, ControlSource, ProjectionConfig, ResidualField};

/// `P` on a uniform grid over `[0, T]`, linearly interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl RiccatiSolution {
    /// Integrate backwards from `P(T) = q_T` with classical RK4.
    pub fn solve(
        hazard: impl Fn(f64) -> f64,
        state_weight: f64,
        control_weight: f64,
        terminal_weight: f64,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        if steps == 0 || !(control_weight > 0.0) || !(horizon > 0.0) {
            return Err(Error::InvalidParameter(
                "Riccati solve needs steps >= 1, r_u > 0, T > 0".into(),
            ));
        }
        let rhs = |t: f64, p: f64| hazard(t) * p - state_weight + p * p / control_weight;
        let h = horizon / steps as f64;
        let mut values = vec![0.0; steps + 1];
        values[steps] = terminal_weight;
        let mut p = terminal_weight;
        for i in (0..steps).rev() {
            let t = (i + 1) as f64 * h;
            // step from t to t - h
            let k1 = rhs(t, p);
            let k2 = rhs(t - 0.5 * h, p - 0.5 * h * k1);
            let k3 = rhs(t - 0.5 * h, p - 0.5 * h * k2);
            let k4 = rhs(t - h, p - h * k3);
            p -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !p.is_finite() {
                return Err(Error::Diverged {
                    step: i,
                    path: None,
                });
            }
            values[i] = p;
        }
        Ok(RiccatiSolution { horizon, values })
    }

    pub fn at(&self, t: f64) -> f64 {
        let n = self.values.len() - 1;
        let s = (t / self.horizon).clamp(0.0, 1.0) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        let w = s - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }
}

/// Feedback `u*(t, x) = -(P(t) / r_u)(x - x*)`.
#[derive(Clone, Debug)]
pub struct Case1Reference {
    pub riccati: RiccatiSolution,
    pub target: Vec<f64>,
    pub control_weight: f64,
}

pub const RICCATI_STEPS: usize = 10_000;

pub fn case1_reference(
    problem: &TargetLq,
    kernel: &DiscountKernel,
    steps: usize,
) -> Result<Case1Reference> {
    if !kernel.is_multiplicative() {
        return Err(Error::Contract(format!(
            "the Riccati reference needs a multiplicative kernel, got {}",
            kernel.name()
        )));
    }
    let hazard = |t: f64| {
        kernel
            .hazard_rate(t)
            .expect("multiplicative kernels have a hazard")
    };
    let riccati = RiccatiSolution::solve(
        hazard,
        problem.state_weight,
        problem.control_weight,
        problem.terminal_weight,
        problem.horizon,
        steps,
    )?;
    Ok(Case1Reference {
        riccati,
        target: problem.target.clone(),
        control_weight: problem.control_weight,
    })
}

impl Case1Reference {
    pub fn gain(&self, t: f64) -> f64 {
        self.riccati.at(t) / self.control_weight
    }
}

impl Policy for Case1Reference {
    fn state_dim(&self) -> usize {
        self.target.len()
    }

    fn control_dim(&self) -> usize {
        self.target.len()
    }

    fn evaluate(
        &self,
        t: f64,
        x: &[f64],
        u: &mut [f64],
        jac: Option<&mut [f64]>,
        _s: &mut Vec<f64>,
    ) -> Result<()> {
        let k = self.gain(t);
        for ((o, xi), ti) in u.iter_mut().zip(x).zip(&self.target) {
            *o = -k * (xi - ti);
        }
        if let Some(j) = jac {
            let d = self.target.len();
            j.fill(0.0);
            for i in 0..d {
                j[i * d + i] = -k;
            }
        }
        Ok(())
    }
}

/// `int_t^T D(t, s) ds` for the diagonal anchor, in closed form.
pub fn discount_integral(kernel: &DiscountKernel, t: f64, horizon: f64) -> Result<f64> {
    let tau = horizon - t;
    let hyperbolic = |k: f64| if k == 0.0 { tau } else { (k * tau).ln_1p() / k };
    Ok(match kernel {
        DiscountKernel::Hyperbolic { kappa } => hyperbolic(*kappa),
        DiscountKernel::TimeVaryingHyperbolic { profile } => hyperbolic(profile.value(t)),
        DiscountKernel::Exponential { rate } => {
            if *rate == 0.0 {
                tau
            } else {
                -(-rate * tau).exp_m1() / rate
            }
        }
        DiscountKernel::SurvivalGamma { alpha0, beta0 } => {
            // ((b + t) / (b + s))^a integrated over s
            let (a, b) = (*alpha0, *beta0);
            let base = b + t;
            if (a - 1.0).abs() < 1e-12 {
                base * ((b + horizon) / base).ln()
            } else {
                base.powf(a) * ((b + horizon).powf(1.0 - a) - base.powf(1.0 - a)) / (1.0 - a)
            }
        }
    })
}

/// `(pi*, c*(t))`, independent of log-wealth.
#[derive(Clone, Debug)]
pub struct MertonReference {
    pub pi: Vec<f64>,
    pub kernel: DiscountKernel,
    pub bequest: f64,
    pub horizon: f64,
}

impl MertonReference {
    pub fn consumption(&self, t: f64) -> f64 {
        let integral = discount_integral(&self.kernel, t, self.horizon).expect("validated kernel");
        1.0 / (integral + self.bequest * self.kernel.factor(t, self.horizon))
    }
}

pub fn case2_reference(problem: &LogMerton, kernel: &DiscountKernel) -> Result<MertonReference> {
    if !matches!(kernel, DiscountKernel::Hyperbolic { .. }) {
        return Err(Error::Contract(format!(
            "case 2 reference needs a hyperbolic kernel, got {}",
            kernel.name()
        )));
    }
    merton_reference(problem, kernel)
}

pub fn case3_reference(problem: &LogMerton, kernel: &DiscountKernel) -> Result<MertonReference> {
    if !matches!(kernel, DiscountKernel::TimeVaryingHyperbolic { .. }) {
        return Err(Error::Contract(format!(
            "case 3 reference needs a time-varying hyperbolic kernel, got {}",
            kernel.name()
        )));
    }
    merton_reference(problem, kernel)
}

fn merton_reference(problem: &LogMerton, kernel: &DiscountKernel) -> Result<MertonReference> {
    kernel.validate(problem.horizon)?;
    Ok(MertonReference {
        pi: problem.merton_fraction(),
        kernel: kernel.clone(),
        bequest: problem.bequest,
        horizon: problem.horizon,
    })
}

impl Policy for MertonReference {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        self.pi.len() + 1
    }

    fn evaluate(
        &self,
        t: f64,
        _x: &[f64],
        u: &mut [f64],
        jac: Option<&mut [f64]>,
        _s: &mut Vec<f64>,
    ) -> Result<()> {
        let n = self.pi.len();
        u[..n].copy_from_slice(&self.pi);
        u[n] = self.consumption(t);
        if let Some(j) = jac {
            j.fill(0.0);
        }
        Ok(())
    }
}

/// Diagonal stationarity residual of a reference control, with the costate
/// estimated from sub-rollouts under the reference itself.
pub fn verify_equilibrium_residual(
    reference: &dyn Policy,
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    grid: &[(f64, Vec<f64>)],
    cfg: &ProjectionConfig,
    seed: u64,
    workers: &Workers,
) -> Result<ResidualField> {
    residual_field(
        ControlSource::Policy(reference),
        grid,
        problem,
        kernel,
        cfg,
        seed,
        workers,
    )
}

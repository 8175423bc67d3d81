//! Two-time discount kernels `D(s, t)`.
//!
//! `s` is the evaluation (anchor) time and `t >= s` the time at which a payoff
//! is received. Every kernel satisfies `D(s, s) = 1` exactly and is
//! non-increasing in `t`. The two structural properties that separate the
//! families are multiplicativity, `D(s,t) = D(s,u) D(u,t)`, and time
//! homogeneity, `D(s,t) = D(s+h, t+h)`; only the exponential kernel has both.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time profile `k(s)` of the impatience parameter of a time-varying hyperbolic kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImpatienceProfile {
    /// `k(s) = k0 + k1 s`
    Linear { k0: f64, k1: f64 },
    /// `k(s) = k0 + amplitude sin(omega s)`, with `k0 > amplitude >= 0`
    Sinusoidal { k0: f64, amplitude: f64, omega: f64 },
    /// `k(s) = k0 exp(-gamma s)`
    Exponential { k0: f64, gamma: f64 },
}

impl ImpatienceProfile {
    pub fn default_linear() -> Self {
        ImpatienceProfile::Linear { k0: 0.5, k1: 1.0 }
    }

    pub fn default_sinusoidal() -> Self {
        ImpatienceProfile::Sinusoidal {
            k0: 1.0,
            amplitude: 0.5,
            omega: 2.0 * PI,
        }
    }

    pub fn default_exponential() -> Self {
        ImpatienceProfile::Exponential {
            k0: 1.5,
            gamma: 1.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ImpatienceProfile::Linear { .. } => "linear",
            ImpatienceProfile::Sinusoidal { .. } => "sinusoidal",
            ImpatienceProfile::Exponential { .. } => "exponential",
        }
    }

    #[inline]
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            ImpatienceProfile::Linear { k0, k1 } => k0 + k1 * s,
            ImpatienceProfile::Sinusoidal {
                k0,
                amplitude,
                omega,
            } => k0 + amplitude * (omega * s).sin(),
            ImpatienceProfile::Exponential { k0, gamma } => k0 * (-gamma * s).exp(),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        let finite = match *self {
            ImpatienceProfile::Linear { k0, k1 } => k0.is_finite() && k1.is_finite(),
            ImpatienceProfile::Sinusoidal {
                k0,
                amplitude,
                omega,
            } => k0.is_finite() && amplitude.is_finite() && omega.is_finite(),
            ImpatienceProfile::Exponential { k0, gamma } => k0.is_finite() && gamma.is_finite(),
        };
        if !finite {
            return Err(Error::InvalidParameter(
                "impatience profile parameters must be finite".into(),
            ));
        }
        match *self {
            ImpatienceProfile::Linear { k0, k1 } => {
                if k0 < 0.0 || k0 + k1 * horizon < 0.0 {
                    return Err(Error::InvalidParameter(
                        "linear impatience profile must stay >= 0 on [0, T]".into(),
                    ));
                }
            }
            ImpatienceProfile::Sinusoidal { k0, amplitude, .. } => {
                if amplitude < 0.0 || k0 <= amplitude {
                    return Err(Error::InvalidParameter(
                        "sinusoidal impatience profile requires k0 > amplitude >= 0".into(),
                    ));
                }
            }
            ImpatienceProfile::Exponential { k0, .. } => {
                if k0 < 0.0 {
                    return Err(Error::InvalidParameter(
                        "exponential impatience profile requires k0 >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A discount kernel family with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscountKernel {
    /// `D(s,t) = exp(-rate (t - s))`
    Exponential { rate: f64 },
    /// `D(s,t) = ((beta0 + s) / (beta0 + t))^alpha0`, survival under a Gamma hazard prior.
    SurvivalGamma { alpha0: f64, beta0: f64 },
    /// `D(s,t) = 1 / (1 + kappa (t - s))`
    Hyperbolic { kappa: f64 },
    /// `D(s,t) = 1 / (1 + k(s) (t - s))`
    TimeVaryingHyperbolic { profile: ImpatienceProfile },
}

/// Quadrant of the multiplicativity / homogeneity taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelClass {
    /// Multiplicative and homogeneous.
    Exponential,
    /// Multiplicative, not homogeneous.
    Case1,
    /// Homogeneous, not multiplicative.
    Case2,
    /// Neither.
    Case3,
}

impl KernelClass {
    pub fn label(self) -> &'static str {
        match self {
            KernelClass::Exponential => "exponential",
            KernelClass::Case1 => "case1",
            KernelClass::Case2 => "case2",
            KernelClass::Case3 => "case3",
        }
    }
}

impl fmt::Display for KernelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Worst-case defects found by [`DiscountKernel::classify`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaxonomyReport {
    pub class: KernelClass,
    pub max_multiplicativity_defect: f64,
    pub max_homogeneity_defect: f64,
    pub resolution: usize,
    pub tol: f64,
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain("kernel arguments must be finite"))
    }
}

impl DiscountKernel {
    pub fn name(&self) -> &'static str {
        match self {
            DiscountKernel::Exponential { .. } => "exponential",
            DiscountKernel::SurvivalGamma { .. } => "survival_gamma",
            DiscountKernel::Hyperbolic { .. } => "hyperbolic",
            DiscountKernel::TimeVaryingHyperbolic { .. } => "time_varying_hyperbolic",
        }
    }

    /// Check the parameter invariants on the horizon `[0, horizon]`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            DiscountKernel::Exponential { rate } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::InvalidParameter(
                        "exponential rate must be >= 0".into(),
                    ));
                }
            }
            DiscountKernel::SurvivalGamma { alpha0, beta0 } => {
                if !(alpha0.is_finite() && *alpha0 > 0.0 && beta0.is_finite() && *beta0 > 0.0) {
                    return Err(Error::InvalidParameter(
                        "survival kernel requires alpha0 > 0 and beta0 > 0".into(),
                    ));
                }
            }
            DiscountKernel::Hyperbolic { kappa } => {
                if !(kappa.is_finite() && *kappa >= 0.0) {
                    return Err(Error::InvalidParameter(
                        "hyperbolic kappa must be >= 0".into(),
                    ));
                }
            }
            DiscountKernel::TimeVaryingHyperbolic { profile } => profile.validate(horizon)?,
        }
        Ok(())
    }

    /// `D(s, t)` without argument checks. Callers guarantee `s <= t`.
    #[inline]
    pub fn factor(&self, s: f64, t: f64) -> f64 {
        match self {
            DiscountKernel::Exponential { rate } => (-rate * (t - s)).exp(),
            DiscountKernel::SurvivalGamma { alpha0, beta0 } => {
                ((beta0 + s) / (beta0 + t)).powf(*alpha0)
            }
            DiscountKernel::Hyperbolic { kappa } => 1.0 / (1.0 + kappa * (t - s)),
            DiscountKernel::TimeVaryingHyperbolic { profile } => {
                1.0 / (1.0 + profile.value(s) * (t - s))
            }
        }
    }

    pub fn evaluate(&self, s: f64, t: f64) -> Result<f64> {
        check_finite(&[s, t])?;
        if s > t {
            return Err(Error::domain(format!(
                "kernel evaluated with s = {s} > t = {t}"
            )));
        }
        Ok(self.factor(s, t))
    }

    pub fn multiplicativity_defect(&self, s: f64, u: f64, t: f64) -> Result<f64> {
        check_finite(&[s, u, t])?;
        if !(s <= u && u <= t) {
            return Err(Error::domain(format!(
                "multiplicativity requires s <= u <= t, got ({s}, {u}, {t})"
            )));
        }
        Ok((self.factor(s, t) - self.factor(s, u) * self.factor(u, t)).abs())
    }

    pub fn homogeneity_defect(&self, s: f64, t: f64, h: f64) -> Result<f64> {
        check_finite(&[s, t, h])?;
        if s > t {
            return Err(Error::domain(format!(
                "homogeneity requires s <= t, got ({s}, {t})"
            )));
        }
        Ok((self.factor(s, t) - self.factor(s + h, t + h)).abs())
    }

    /// Instantaneous discount rate `-d/dt log D(s, t)` for multiplicative kernels,
    /// where it depends on `t` only. `None` for the non-multiplicative families.
    pub fn hazard_rate(&self, t: f64) -> Option<f64> {
        match self {
            DiscountKernel::Exponential { rate } => Some(*rate),
            DiscountKernel::SurvivalGamma { alpha0, beta0 } => Some(alpha0 / (beta0 + t)),
            _ => None,
        }
    }

    /// Place the kernel in the taxonomy by scanning a uniform `resolution`-point
    /// grid on `[0, horizon]` for the largest defect of each property.
    pub fn classify(&self, horizon: f64, resolution: usize, tol: f64) -> TaxonomyReport {
        let n = resolution.max(2);
        let grid: Vec<f64> = (0..n)
            .map(|i| horizon * i as f64 / (n - 1) as f64)
            .collect();
        let mut mult: f64 = 0.0;
        let mut homo: f64 = 0.0;
        for (i, &s) in grid.iter().enumerate() {
            for (j, &u) in grid.iter().enumerate().skip(i) {
                for &t in &grid[j..] {
                    mult =
                        mult.max((self.factor(s, t) - self.factor(s, u) * self.factor(u, t)).abs());
                }
                // reuse (s, u) as an (s, t) pair for the shift scan
                for &h in &grid[1..] {
                    if u + h > horizon + 1e-12 {
                        break;
                    }
                    homo = homo.max((self.factor(s, u) - self.factor(s + h, u + h)).abs());
                }
            }
        }
        let class = match (mult <= tol, homo <= tol) {
            (true, true) => KernelClass::Exponential,
            (true, false) => KernelClass::Case1,
            (false, true) => KernelClass::Case2,
            (false, false) => KernelClass::Case3,
        };
        TaxonomyReport {
            class,
            max_multiplicativity_defect: mult,
            max_homogeneity_defect: homo,
            resolution: n,
            tol,
        }
    }

    pub fn is_multiplicative(&self) -> bool {
        matches!(
            self,
            DiscountKernel::Exponential { .. } | DiscountKernel::SurvivalGamma { .. }
        )
    }
}

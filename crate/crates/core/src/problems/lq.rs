use super::{ControlProblem, Dims, PartialsMut};
use crate::error::{Error, Result};

/// Target-tracking linear-quadratic problem: `b = u`, `sigma = sigma0 I`,
/// `l = -(q_s |x - x*|^2 + r_u |u|^2)`, `g = -q_T |x - x*|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetLq {
    pub target: Vec<f64>,
    pub state_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
    pub noise: f64,
    pub horizon: f64,
    /// Optional symmetric box `|u_i| <= bound`, expressed as `2d` inequality constraints.
    pub control_bound: Option<f64>,
}

pub fn make_case1_lq(
    target: Vec<f64>,
    state_weight: f64,
    control_weight: f64,
    terminal_weight: f64,
    noise: f64,
    horizon: f64,
) -> Result<TargetLq> {
    if target.is_empty() {
        return Err(Error::InvalidParameter(
            "state dimension must be >= 1".into(),
        ));
    }
    if !(control_weight > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "control weight r_u must be > 0 (got {control_weight}); the Hamiltonian is unbounded otherwise"
        )));
    }
    if !(state_weight >= 0.0 && terminal_weight >= 0.0) {
        return Err(Error::InvalidParameter(
            "state and terminal weights must be >= 0".into(),
        ));
    }
    if !(noise > 0.0) {
        return Err(Error::InvalidParameter(
            "noise level sigma0 must be > 0".into(),
        ));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter("horizon must be > 0".into()));
    }
    Ok(TargetLq {
        target,
        state_weight,
        control_weight,
        terminal_weight,
        noise,
        horizon,
        control_bound: None,
    })
}

impl TargetLq {
    /// Same problem with a deterministic diffusion; used by the Euler-remainder diagnostics.
    pub fn deterministic(mut self) -> Self {
        self.noise = 0.0;
        self
    }

    pub fn with_control_bound(mut self, bound: f64) -> Self {
        self.control_bound = Some(bound);
        self
    }

    fn dim(&self) -> usize {
        self.target.len()
    }

    fn deviation_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl ControlProblem for TargetLq {
    fn dims(&self) -> Dims {
        let d = self.dim();
        Dims {
            state: d,
            control: d,
            noise: d,
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = self.noise;
        }
    }

    fn running_reward(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        let uu: f64 = u.iter().map(|v| v * v).sum();
        -(self.state_weight * self.deviation_sq(x) + self.control_weight * uu)
    }

    fn terminal_reward(&self, x: &[f64]) -> f64 {
        -self.terminal_weight * self.deviation_sq(x)
    }

    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), ti) in out.iter_mut().zip(x).zip(&self.target) {
            *o = -2.0 * self.terminal_weight * (xi - ti);
        }
    }

    fn partials(&self, _t: f64, x: &[f64], u: &[f64], out: PartialsMut<'_>) {
        let d = self.dim();
        out.bx.fill(0.0);
        out.bu.fill(0.0);
        for i in 0..d {
            out.bu[i * d + i] = 1.0;
        }
        out.sx.fill(0.0);
        out.su.fill(0.0);
        for ((o, xi), ti) in out.lx.iter_mut().zip(x).zip(&self.target) {
            *o = -2.0 * self.state_weight * (xi - ti);
        }
        for (o, ui) in out.lu.iter_mut().zip(u) {
            *o = -2.0 * self.control_weight * ui;
        }
    }

    fn reward_hessian_uu(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        let m = self.dim();
        out.fill(0.0);
        for i in 0..m {
            out[i * m + i] = -2.0 * self.control_weight;
        }
    }

    fn drift_hessian_uu(&self, _t: f64, _x: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_hessian_uu(&self, _t: f64, _x: &[f64], _u: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn control_dependent_diffusion(&self) -> bool {
        false
    }

    fn num_constraints(&self) -> usize {
        if self.control_bound.is_some() {
            2 * self.dim()
        } else {
            0
        }
    }

    fn constraint(&self, i: usize, _x: &[f64], u: &[f64]) -> f64 {
        let bound = self.control_bound.expect("constraint without bound");
        let (coord, sign) = (i / 2, if i.is_multiple_of(2) { 1.0 } else { -1.0 });
        sign * u[coord] - bound
    }

    fn constraint_gradient(&self, i: usize, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[i / 2] = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
    }

    fn constraint_hessian(&self, _i: usize, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

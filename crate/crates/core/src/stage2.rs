//! Adjoint-MC projection: estimate the diagonal costate at a query, then
//! maximize the anchored Hamiltonian
//! `H = D(t0, t) l + <lambda, b> + <Z, sigma>_F` over the action.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::adjoint::{mc_costate, CostateConfig};
use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::parallel::Workers;
use crate::policy::Policy;
use crate::problems::ControlProblem;
use crate::rng::mix_keys;
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// `M_MC`
    pub samples: usize,
    /// `N'`
    pub steps: usize,
    pub antithetic: bool,
    pub tol_h: f64,
    pub max_newton: usize,
    /// Sufficient-increase constant of the backtracking search.
    pub armijo: f64,
    pub shrink: f64,
    /// Eigenvalue floor of the negated Hessian.
    pub hessian_floor: f64,
    pub barrier_initial: f64,
    pub barrier_decay: f64,
    pub barrier_floor: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            samples: 256,
            steps: 16,
            antithetic: true,
            tol_h: 1e-8,
            max_newton: 20,
            armijo: 1e-4,
            shrink: 0.5,
            hessian_floor: 1e-8,
            barrier_initial: 1e-2,
            barrier_decay: 0.1,
            barrier_floor: 1e-8,
        }
    }
}

impl ProjectionConfig {
    /// Errors carry the offending field as a config path.
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(f, m));
        if self.samples == 0 {
            return bad("samples", "M_MC must be >= 1");
        }
        if self.steps == 0 {
            return bad("steps", "N' must be >= 1");
        }
        if self.antithetic && !self.samples.is_multiple_of(2) {
            return bad("samples", "antithetic projection needs an even M_MC");
        }
        if !(self.tol_h > 0.0) {
            return bad("tol_h", "must be > 0");
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return bad("armijo", "must lie in (0, 0.5)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink", "must lie in (0, 1)");
        }
        if !(self.hessian_floor > 0.0) {
            return bad("hessian_floor", "must be > 0");
        }
        if !(self.barrier_floor > 0.0) {
            return bad("barrier_floor", "must be > 0");
        }
        if !(self.barrier_initial >= self.barrier_floor) {
            return bad("barrier_initial", "must be >= barrier_floor");
        }
        if !(self.barrier_decay > 0.0 && self.barrier_decay < 1.0) {
            return bad("barrier_decay", "must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn costate(&self, with_z: bool) -> CostateConfig {
        CostateConfig {
            samples: self.samples,
            steps: self.steps,
            antithetic: self.antithetic,
            with_z,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// `m x m` row-major.
    pub hess: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    anchor: f64,
    t: f64,
    x: &[f64],
    u: &[f64],
    lambda: &[f64],
    z: Option<&[f64]>,
) -> Result<HamiltonianEval> {
    let dims = problem.dims();
    let (d, m, q) = (dims.state, dims.control, dims.noise);
    if z.is_none() && problem.requires_z() {
        return Err(Error::Contract(
            "the diffusion depends on the control; Z must be supplied".into(),
        ));
    }
    if lambda.len() != d || u.len() != m || x.len() != d || z.is_some_and(|z| z.len() != d * q) {
        return Err(Error::Contract(
            "Hamiltonian argument has the wrong length".into(),
        ));
    }
    if !(x.iter().chain(u).chain(lambda).all(|v| v.is_finite())) || !t.is_finite() {
        return Err(Error::domain("Hamiltonian inputs must be finite"));
    }
    let disc = kernel.evaluate(anchor, t)?;
    let mut b = vec![0.0; d];
    problem.drift(t, x, u, &mut b);
    let mut value = disc * problem.running_reward(t, x, u);
    value += lambda.iter().zip(&b).map(|(l, v)| l * v).sum::<f64>();
    let mut block = vec![0.0; dims.partials_len()];
    problem.partials(t, x, u, dims.split_mut(&mut block));
    let parts = dims.split(&block);
    let mut grad: Vec<f64> = (0..m)
        .map(|c| {
            let mut acc = disc * parts.lu[c];
            for i in 0..d {
                acc += parts.bu[i * m + c] * lambda[i];
            }
            acc
        })
        .collect();
    let mut hess = vec![0.0; m * m];
    problem.reward_hessian_uu(t, x, u, &mut hess);
    for h in hess.iter_mut() {
        *h *= disc;
    }
    let mut extra = vec![0.0; m * m];
    problem.drift_hessian_uu(t, x, u, lambda, &mut extra);
    for (h, e) in hess.iter_mut().zip(&extra) {
        *h += e;
    }
    if let Some(z) = z {
        let mut sig = vec![0.0; d * q];
        problem.diffusion(t, x, u, &mut sig);
        value += z.iter().zip(&sig).map(|(a, b)| a * b).sum::<f64>();
        for (c, g) in grad.iter_mut().enumerate() {
            for i in 0..d {
                for j in 0..q {
                    *g += parts.su[(j * d + i) * m + c] * z[i * q + j];
                }
            }
        }
        problem.diffusion_hessian_uu(t, x, u, z, &mut extra);
        for (h, e) in hess.iter_mut().zip(&extra) {
            *h += e;
        }
    }
    Ok(HamiltonianEval { value, grad, hess })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveFlag {
    Converged,
    IterationCap,
    /// A gradient step replaced a failed Newton step at least once.
    GradientFallback,
    /// No ascent was possible; the warm start is returned.
    Stalled,
}

impl SolveFlag {
    pub fn label(self) -> &'static str {
        match self {
            SolveFlag::Converged => "converged",
            SolveFlag::IterationCap => "iteration_cap",
            SolveFlag::GradientFallback => "gradient_fallback",
            SolveFlag::Stalled => "stalled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Maximizer {
    pub u: Vec<f64>,
    /// `||d_u H||_inf` at `u`.
    pub grad_inf: f64,
    pub iterations: usize,
    pub h_initial: f64,
    pub h_final: f64,
    pub flag: SolveFlag,
}

/// Objective in solver coordinates: `v_c = log u_c` for positive controls,
/// `v_c = u_c` otherwise, plus `mu * sum log(-g_i)` when constrained.
struct Objective<'a> {
    problem: &'a dyn ControlProblem,
    kernel: &'a DiscountKernel,
    t: f64,
    x: &'a [f64],
    lambda: &'a [f64],
    z: Option<&'a [f64]>,
    positive: Vec<bool>,
    constraints: usize,
}

struct Local {
    u: Vec<f64>,
    h: HamiltonianEval,
    phi: f64,
    grad_v: DVector<f64>,
    hess_v: DMatrix<f64>,
    /// Gradient of the barrier objective in `u`.
    grad_phi_u: Vec<f64>,
}

impl Objective<'_> {
    fn to_u(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.positive)
            .map(|(a, p)| if *p { a.exp() } else { *a })
            .collect()
    }

    fn feasible(&self, u: &[f64]) -> bool {
        u.iter().all(|v| v.is_finite())
            && (0..self.constraints).all(|i| self.problem.constraint(i, self.x, u) < 0.0)
    }

    fn eval(&self, v: &[f64], mu: f64) -> Result<Option<Local>> {
        let u = self.to_u(v);
        if !self.feasible(&u) {
            return Ok(None);
        }
        let m = u.len();
        let h = hamiltonian(
            self.problem,
            self.kernel,
            self.t,
            self.t,
            self.x,
            &u,
            self.lambda,
            self.z,
        )?;
        let mut phi = h.value;
        let mut gu = h.grad.clone();
        let mut hu = DMatrix::from_row_slice(m, m, &h.hess);
        if self.constraints > 0 {
            let mut cg = vec![0.0; m];
            let mut ch = vec![0.0; m * m];
            for i in 0..self.constraints {
                let gi = self.problem.constraint(i, self.x, &u);
                self.problem.constraint_gradient(i, self.x, &u, &mut cg);
                self.problem.constraint_hessian(i, self.x, &u, &mut ch);
                phi += mu * (-gi).ln();
                for a in 0..m {
                    gu[a] += mu * cg[a] / gi;
                    for b in 0..m {
                        hu[(a, b)] += mu * (ch[a * m + b] / gi - cg[a] * cg[b] / (gi * gi));
                    }
                }
            }
        }
        if !phi.is_finite() {
            return Ok(None);
        }
        let scale: Vec<f64> = u
            .iter()
            .zip(&self.positive)
            .map(|(uc, p)| if *p { *uc } else { 1.0 })
            .collect();
        let grad_v = DVector::from_iterator(m, gu.iter().zip(&scale).map(|(g, s)| g * s));
        let mut hess_v = hu;
        for a in 0..m {
            for b in 0..m {
                hess_v[(a, b)] *= scale[a] * scale[b];
            }
            if self.positive[a] {
                hess_v[(a, a)] += gu[a] * scale[a];
            }
        }
        Ok(Some(Local {
            u,
            h,
            phi,
            grad_v,
            hess_v,
            grad_phi_u: gu,
        }))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Ascent direction `(-H)^{-1} g` with the spectrum of `-H` floored.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, floor: f64) -> Option<DVector<f64>> {
    let neg = -hess;
    let sym = (&neg + neg.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 500)?;
    let vals = eig.eigenvalues.map(|e| e.max(floor));
    let coeff = eig.eigenvectors.transpose() * grad;
    let scaled = DVector::from_iterator(
        coeff.len(),
        coeff.iter().zip(vals.iter()).map(|(c, e)| c / e),
    );
    let dir = &eig.eigenvectors * scaled;
    dir.iter().all(|v| v.is_finite()).then_some(dir)
}

/// Pointwise maximizer of `H(t, t, x, ., lambda, Z)` warm-started at `u0`.
#[allow(clippy::too_many_arguments)]
pub fn maximize_hamiltonian(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    t: f64,
    x: &[f64],
    lambda: &[f64],
    z: Option<&[f64]>,
    u0: &[f64],
    cfg: &ProjectionConfig,
) -> Result<Maximizer> {
    let positive = problem.positive_controls();
    if u0.iter().zip(&positive).any(|(u, p)| *p && !(*u > 0.0)) {
        return Err(Error::Contract(
            "warm start violates a positivity constraint".into(),
        ));
    }
    let obj = Objective {
        problem,
        kernel,
        t,
        x,
        lambda,
        z,
        positive,
        constraints: problem.num_constraints(),
    };
    if !obj.feasible(u0) {
        return Err(Error::Contract(
            "warm start is not strictly feasible".into(),
        ));
    }
    let constrained = obj.constraints > 0;
    let mut v: Vec<f64> = u0
        .iter()
        .zip(&obj.positive)
        .map(|(u, p)| if *p { u.ln() } else { *u })
        .collect();
    let start = obj
        .eval(&v, cfg.barrier_initial)?
        .expect("feasible warm start");
    let h_initial = start.h.value;
    let mut best_u = start.u.clone();
    let mut best = start.h;

    let mut mus = vec![0.0];
    if constrained {
        mus.clear();
        let mut mu = cfg.barrier_initial;
        while mu >= cfg.barrier_floor * (1.0 - 1e-12) {
            mus.push(mu);
            mu *= cfg.barrier_decay;
        }
    }
    let mut iterations = 0;
    let mut fallback = false;
    let mut capped = false;
    let mut stalled = false;
    for &mu in &mus {
        let mut cur = obj.eval(&v, mu)?.expect("iterate stays feasible");
        let mut stage_iters = 0;
        loop {
            let stationary = inf_norm(&cur.grad_phi_u) <= cfg.tol_h;
            if stationary {
                break;
            }
            if stage_iters == cfg.max_newton {
                capped = true;
                break;
            }
            stage_iters += 1;
            iterations += 1;
            let newton = newton_direction(&cur.hess_v, &cur.grad_v, cfg.hessian_floor);
            let mut next = None;
            if let Some(dir) = newton.filter(|p| p.dot(&cur.grad_v) > 0.0) {
                next = line_search(&obj, &v, &cur, &dir, mu, cfg, h_initial)?;
            }
            if next.is_none() {
                fallback = true;
                let dir = cur.grad_v.clone();
                next = line_search(&obj, &v, &cur, &dir, mu, cfg, h_initial)?;
            }
            match next {
                Some((nv, local)) => {
                    v = nv;
                    cur = local;
                }
                None => {
                    stalled = true;
                    break;
                }
            }
        }
        if cur.h.value >= best.value || !constrained {
            best_u = cur.u.clone();
            best = cur.h;
        }
        if stalled {
            break;
        }
    }
    // never return something worse than the warm start
    let (u, h) = if best.value >= h_initial {
        (best_u, best)
    } else {
        let h0 = hamiltonian(problem, kernel, t, t, x, u0, lambda, z)?;
        (u0.to_vec(), h0)
    };
    let grad_inf = inf_norm(&h.grad);
    let flag = if grad_inf <= cfg.tol_h || (constrained && !capped && !stalled) {
        if fallback {
            SolveFlag::GradientFallback
        } else {
            SolveFlag::Converged
        }
    } else if stalled {
        SolveFlag::Stalled
    } else if capped {
        SolveFlag::IterationCap
    } else {
        SolveFlag::GradientFallback
    };
    Ok(Maximizer {
        u,
        grad_inf,
        iterations,
        h_initial,
        h_final: h.value,
        flag,
    })
}

/// Backtracking along `dir`. Steps are accepted under the Armijo condition,
/// or, once the predicted gain is below rounding, if the objective does not
/// drop by more than rounding and `H` stays at or above its initial value.
fn line_search(
    obj: &Objective<'_>,
    v: &[f64],
    cur: &Local,
    dir: &DVector<f64>,
    mu: f64,
    cfg: &ProjectionConfig,
    h_initial: f64,
) -> Result<Option<(Vec<f64>, Local)>> {
    let slope = cur.grad_v.dot(dir);
    let noise = 64.0 * f64::EPSILON * (1.0 + cur.phi.abs());
    let mut alpha = 1.0;
    for _ in 0..60 {
        let trial: Vec<f64> = v
            .iter()
            .zip(dir.iter())
            .map(|(a, p)| a + alpha * p)
            .collect();
        if let Some(local) = obj.eval(&trial, mu)? {
            let gain = local.phi - cur.phi;
            let armijo = gain >= cfg.armijo * alpha * slope;
            let flat = alpha * slope <= noise && gain >= -noise && local.h.value >= h_initial;
            if armijo || flat {
                return Ok(Some((trial, local)));
            }
        }
        alpha *= cfg.shrink;
    }
    Ok(None)
}

/// One projected query.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u_warm: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_std_error: Vec<f64>,
    pub z: Option<Vec<f64>>,
    pub grad_inf: f64,
    pub h_warm: f64,
    pub h_final: f64,
    pub newton_iters: usize,
    pub samples: usize,
    pub steps: usize,
    pub flag: SolveFlag,
    pub wall_us: f64,
}

/// Costate at the diagonal anchor `t`, then Hamiltonian maximization
/// warm-started at the frozen policy.
#[allow(clippy::too_many_arguments)]
pub fn project(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    policy: &dyn Policy,
    t: f64,
    x: &[f64],
    cfg: &ProjectionConfig,
    seed: u64,
    workers: &Workers,
) -> Result<ProjectionRecord> {
    let clock = Instant::now();
    let with_z = problem.requires_z();
    let est = mc_costate(
        problem,
        policy,
        kernel,
        t,
        x,
        &cfg.costate(with_z),
        seed,
        workers,
    )?;
    let u_warm = policy.act(t, x)?;
    let sol = maximize_hamiltonian(
        problem,
        kernel,
        t,
        x,
        &est.lambda,
        est.z.as_deref(),
        &u_warm,
        cfg,
    )?;
    let wall_us = clock.elapsed().as_secs_f64() * 1e6;
    Ok(ProjectionRecord {
        t,
        x: x.to_vec(),
        u: sol.u,
        u_warm,
        lambda: est.lambda,
        lambda_std_error: est.lambda_std_error,
        z: est.z,
        grad_inf: sol.grad_inf,
        h_warm: sol.h_initial,
        h_final: sol.h_final,
        newton_iters: sol.iterations,
        samples: cfg.samples,
        steps: cfg.steps,
        flag: sol.flag,
        wall_us,
    })
}

/// Per-query seed for grid evaluations.
pub fn query_seed(base: u64, index: usize) -> u64 {
    mix_keys(&[base, index as u64])
}

/// Project every grid point. Points are spread over the workers; each query's
/// sub-rollouts run sequentially inside its task.
pub fn project_grid(
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    policy: &dyn Policy,
    grid: &[(f64, Vec<f64>)],
    cfg: &ProjectionConfig,
    seed: u64,
    workers: &Workers,
) -> Vec<Result<ProjectionRecord>> {
    let inner = Workers::sequential();
    workers.map(grid.len(), |i| {
        let (t, x) = &grid[i];
        project(
            problem,
            kernel,
            policy,
            *t,
            x,
            cfg,
            query_seed(seed, i),
            &inner,
        )
    })
}

/// Which control the stationarity residual is evaluated at. The costate is
/// always estimated with sub-rollouts under the given policy.
#[derive(Clone, Copy)]
pub enum ControlSource<'a> {
    /// The policy's own action.
    Policy(&'a dyn Policy),
    /// The Hamiltonian maximizer warm-started at the policy.
    Projected(&'a dyn Policy),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualField {
    /// `R = mean ||d_u H||_1`
    pub mean: f64,
    pub values: Vec<f64>,
    /// Per-point `||d_u H||_1` restricted to each control block.
    pub block_values: Vec<Vec<f64>>,
    pub max: f64,
}

pub fn residual_field(
    source: ControlSource<'_>,
    grid: &[(f64, Vec<f64>)],
    problem: &dyn ControlProblem,
    kernel: &DiscountKernel,
    cfg: &ProjectionConfig,
    seed: u64,
    workers: &Workers,
) -> Result<ResidualField> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("residual grid is empty".into()));
    }
    let blocks = problem.control_blocks();
    let with_z = problem.requires_z();
    let inner = Workers::sequential();
    let policy = match source {
        ControlSource::Policy(p) | ControlSource::Projected(p) => p,
    };
    let rows = workers.map(grid.len(), |i| -> Result<Vec<f64>> {
        let (t, x) = &grid[i];
        let s = query_seed(seed, i);
        let est = mc_costate(
            problem,
            policy,
            kernel,
            *t,
            x,
            &cfg.costate(with_z),
            s,
            &inner,
        )?;
        let u = match source {
            ControlSource::Policy(p) => p.act(*t, x)?,
            ControlSource::Projected(p) => {
                let u0 = p.act(*t, x)?;
                maximize_hamiltonian(
                    problem,
                    kernel,
                    *t,
                    x,
                    &est.lambda,
                    est.z.as_deref(),
                    &u0,
                    cfg,
                )?
                .u
            }
        };
        let h = hamiltonian(
            problem,
            kernel,
            *t,
            *t,
            x,
            &u,
            &est.lambda,
            est.z.as_deref(),
        )?;
        Ok(blocks
            .iter()
            .map(|b| h.grad[b.range.clone()].iter().map(|g| g.abs()).sum())
            .collect())
    });
    let rows = rows.into_iter().collect::<Result<Vec<Vec<f64>>>>()?;
    let values: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let block_values = (0..blocks.len())
        .map(|b| rows.iter().map(|r| r[b]).collect())
        .collect();
    Ok(ResidualField {
        mean: stats::mean(&values),
        max: values.iter().fold(0.0, |a, b| a.max(*b)),
        values,
        block_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_case1_lq, make_case2_merton};

    #[test]
    fn case1_quadratic_solves_in_one_step() {
        let p = make_case1_lq(vec![0.0, 0.0], 1.0, 0.5, 1.0, 0.2, 1.0).unwrap();
        let k = DiscountKernel::SurvivalGamma {
            alpha0: 1.0,
            beta0: 0.2,
        };
        let lam = [0.3, -0.8];
        let sol = maximize_hamiltonian(
            &p,
            &k,
            0.4,
            &[0.1, 0.2],
            &lam,
            None,
            &[0.0, 0.0],
            &ProjectionConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.iterations, 1);
        for i in 0..2 {
            assert!((sol.u[i] - lam[i] / (2.0 * 0.5)).abs() < 1e-14);
        }
        assert!(sol.grad_inf <= 1e-8);
    }

    #[test]
    fn merton_consumption_and_portfolio() {
        let p = make_case2_merton(
            0.02,
            vec![0.06],
            DMatrix::from_element(1, 1, 0.04),
            0.0,
            1.0,
        )
        .unwrap();
        let k = DiscountKernel::Hyperbolic { kappa: 1.0 };
        let lam = [std::f64::consts::LN_2];
        let sol = maximize_hamiltonian(
            &p,
            &k,
            0.0,
            &[0.0],
            &lam,
            None,
            &[0.5, 0.8],
            &ProjectionConfig::default(),
        )
        .unwrap();
        assert!((sol.u[0] - 1.5).abs() < 1e-8, "{:?}", sol);
        assert!((sol.u[1] - 1.0 / std::f64::consts::LN_2).abs() < 1e-8);
        assert!(sol.grad_inf <= 1e-8 && sol.h_final >= sol.h_initial);
    }

    #[test]
    fn missing_z_is_a_contract_error_when_required() {
        struct NeedsZ(crate::problems::TargetLq);
        impl ControlProblem for NeedsZ {
            fn dims(&self) -> crate::problems::Dims {
                self.0.dims()
            }
            fn horizon(&self) -> f64 {
                self.0.horizon()
            }
            fn drift(&self, t: f64, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.drift(t, x, u, o)
            }
            fn diffusion(&self, t: f64, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.diffusion(t, x, u, o)
            }
            fn running_reward(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
                self.0.running_reward(t, x, u)
            }
            fn terminal_reward(&self, x: &[f64]) -> f64 {
                self.0.terminal_reward(x)
            }
            fn terminal_gradient(&self, x: &[f64], o: &mut [f64]) {
                self.0.terminal_gradient(x, o)
            }
            fn partials(&self, t: f64, x: &[f64], u: &[f64], o: crate::problems::PartialsMut<'_>) {
                self.0.partials(t, x, u, o)
            }
            fn reward_hessian_uu(&self, t: f64, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.reward_hessian_uu(t, x, u, o)
            }
            fn drift_hessian_uu(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], o: &mut [f64]) {
                self.0.drift_hessian_uu(t, x, u, p, o)
            }
            fn diffusion_hessian_uu(&self, t: f64, x: &[f64], u: &[f64], z: &[f64], o: &mut [f64]) {
                self.0.diffusion_hessian_uu(t, x, u, z, o)
            }
            fn control_dependent_diffusion(&self) -> bool {
                true
            }
        }
        let p = NeedsZ(make_case1_lq(vec![0.0], 1.0, 0.5, 1.0, 0.2, 1.0).unwrap());
        let k = DiscountKernel::Exponential { rate: 0.0 };
        let r = hamiltonian(&p, &k, 0.0, 0.0, &[0.0], &[0.0], &[1.0], None);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(hamiltonian(&p, &k, 0.0, 0.0, &[0.0], &[0.0], &[1.0], Some(&[0.5])).is_ok());
    }

    #[test]
    fn barrier_keeps_iterates_feasible() {
        let p = make_case1_lq(vec![0.0], 1.0, 0.5, 1.0, 0.2, 1.0)
            .unwrap()
            .with_control_bound(1.0);
        let k = DiscountKernel::Exponential { rate: 0.0 };
        // unconstrained optimum lambda / (2 r_u) = 3 lies outside the box
        let sol = maximize_hamiltonian(
            &p,
            &k,
            0.0,
            &[0.0],
            &[3.0],
            None,
            &[0.0],
            &ProjectionConfig::default(),
        )
        .unwrap();
        assert!(sol.u[0] < 1.0 && sol.u[0] > 0.99, "{:?}", sol);
        assert!(sol.h_final >= sol.h_initial);
    }
}

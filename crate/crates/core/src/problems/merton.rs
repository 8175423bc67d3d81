use nalgebra::DMatrix;

use super::{ControlBlock, ControlProblem, Dims, PartialsMut};
use crate::error::{Error, Result};

/// Merton consumption-investment problem with log utility, simulated in
/// log-wealth `y = log W`.
///
/// Controls are `u = (pi_1..pi_n, c)` with `c > 0` the consumption-to-wealth
/// ratio. Dynamics:
/// `dy = (r + pi'(mu - r) - c - pi' Sigma pi / 2) dt + pi' L dW`, `Sigma = L L'`.
/// Rewards: `l = log c + y` (log utility of absolute consumption `c W`),
/// `g = bequest * y`.
#[derive(Clone, Debug)]
pub struct LogMerton {
    pub rate: f64,
    pub excess: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance, row-major `n x n`.
    chol: Vec<f64>,
    pub bequest: f64,
    pub horizon: f64,
}

/// Log-wealth Merton instance with hyperbolic discounting attached at run level.
pub fn make_case2_merton(
    rate: f64,
    excess: Vec<f64>,
    covariance: DMatrix<f64>,
    bequest: f64,
    horizon: f64,
) -> Result<LogMerton> {
    let n = excess.len();
    if n == 0 {
        return Err(Error::InvalidParameter(
            "need at least one risky asset".into(),
        ));
    }
    if covariance.nrows() != n || covariance.ncols() != n {
        return Err(Error::InvalidParameter(format!(
            "covariance must be {n}x{n}, got {}x{}",
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    let asym = (&covariance - covariance.transpose()).amax();
    if !(asym <= 1e-12 * covariance.amax().max(1.0)) {
        return Err(Error::InvalidParameter(
            "covariance is not symmetric".into(),
        ));
    }
    let chol = covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut chol_flat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            chol_flat[i * n + j] = l[(i, j)];
        }
    }
    if !(bequest >= 0.0 && bequest.is_finite()) {
        return Err(Error::InvalidParameter(
            "bequest weight must be >= 0".into(),
        ));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter("horizon must be > 0".into()));
    }
    if !rate.is_finite() || excess.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "market parameters must be finite".into(),
        ));
    }
    Ok(LogMerton {
        rate,
        excess,
        covariance,
        chol: chol_flat,
        bequest,
        horizon,
    })
}

/// The resource problem shares the Merton construction; its time-varying
/// kernel lives in the run configuration, not in the problem.
pub fn make_case3_resource(
    rate: f64,
    excess: Vec<f64>,
    covariance: DMatrix<f64>,
    bequest: f64,
    horizon: f64,
) -> Result<LogMerton> {
    make_case2_merton(rate, excess, covariance, bequest, horizon)
}

impl LogMerton {
    pub fn assets(&self) -> usize {
        self.excess.len()
    }

    /// `Sigma^{-1} (mu - r)`.
    pub fn merton_fraction(&self) -> Vec<f64> {
        let rhs = nalgebra::DVector::from_column_slice(&self.excess);
        let chol = self
            .covariance
            .clone()
            .cholesky()
            .expect("validated at construction");
        chol.solve(&rhs).iter().copied().collect()
    }

    fn quad(&self, pi: &[f64]) -> f64 {
        let n = self.assets();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.covariance[(i, j)] * pi[j];
            }
            acc += pi[i] * row;
        }
        acc
    }
}

impl ControlProblem for LogMerton {
    fn dims(&self) -> Dims {
        let n = self.assets();
        Dims {
            state: 1,
            control: n + 1,
            noise: n,
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.assets();
        let pi = &u[..n];
        let c = u[n];
        let premium: f64 = pi.iter().zip(&self.excess).map(|(a, b)| a * b).sum();
        out[0] = self.rate + premium - c - 0.5 * self.quad(pi);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.assets();
        for j in 0..n {
            let mut s = 0.0;
            for i in j..n {
                s += u[i] * self.chol[i * n + j];
            }
            out[j] = s;
        }
    }

    fn running_reward(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        u[self.assets()].ln() + x[0]
    }

    fn terminal_reward(&self, x: &[f64]) -> f64 {
        self.bequest * x[0]
    }

    fn terminal_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.bequest;
    }

    fn partials(&self, _t: f64, _x: &[f64], u: &[f64], out: PartialsMut<'_>) {
        let n = self.assets();
        let m = n + 1;
        out.bx[0] = 0.0;
        for i in 0..n {
            let mut sp = 0.0;
            for j in 0..n {
                sp += self.covariance[(i, j)] * u[j];
            }
            out.bu[i] = self.excess[i] - sp;
        }
        out.bu[n] = -1.0;
        out.sx.fill(0.0);
        // column j of sigma is sum_i pi_i L_ij
        for j in 0..n {
            let block = &mut out.su[j * m..(j + 1) * m];
            for (i, b) in block.iter_mut().enumerate().take(n) {
                *b = self.chol[i * n + j];
            }
            block[n] = 0.0;
        }
        out.lx[0] = 1.0;
        out.lu[..n].fill(0.0);
        out.lu[n] = 1.0 / u[n];
    }

    fn reward_hessian_uu(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.assets();
        let m = n + 1;
        out.fill(0.0);
        out[n * m + n] = -1.0 / (u[n] * u[n]);
    }

    fn drift_hessian_uu(&self, _t: f64, _x: &[f64], _u: &[f64], p: &[f64], out: &mut [f64]) {
        let n = self.assets();
        let m = n + 1;
        out.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                out[i * m + j] = -p[0] * self.covariance[(i, j)];
            }
        }
    }

    fn diffusion_hessian_uu(&self, _t: f64, _x: &[f64], _u: &[f64], _z: &[f64], out: &mut [f64]) {
        // sigma is linear in pi
        out.fill(0.0);
    }

    fn control_dependent_diffusion(&self) -> bool {
        true
    }

    /// Log utility makes the log-wealth costate additive in `y`, so its
    /// martingale coefficient vanishes along y-independent policies and the
    /// maximizer is determined by the costate alone.
    fn requires_z(&self) -> bool {
        false
    }

    fn positive_controls(&self) -> Vec<bool> {
        let mut v = vec![false; self.assets() + 1];
        v[self.assets()] = true;
        v
    }

    fn control_blocks(&self) -> Vec<ControlBlock> {
        let n = self.assets();
        vec![
            ControlBlock {
                name: "pi".into(),
                range: 0..n,
            },
            ControlBlock {
                name: "c".into(),
                range: n..n + 1,
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(n: usize) -> LogMerton {
        make_case2_merton(
            0.02,
            vec![0.06; n],
            DMatrix::from_diagonal_element(n, n, 0.04),
            0.2,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn reward_values() {
        let p = instance(1);
        assert_eq!(p.running_reward(0.0, &[0.0], &[0.0, 1.0]), 0.0);
        let dims = p.dims();
        let mut block = vec![0.0; dims.partials_len()];
        p.partials(0.0, &[0.0], &[0.3, 2.0], dims.split_mut(&mut block));
        assert_eq!(dims.split(&block).lu[1], 0.5);
    }

    #[test]
    fn merton_fraction_scalar() {
        let p = instance(1);
        assert!((p.merton_fraction()[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn wealth_shift_is_additive() {
        let p = instance(3);
        let u = [0.4, -0.1, 0.7, 1.3];
        for a in [-2.0, 0.5, 3.25] {
            let diff = p.running_reward(0.1, &[0.7 + a], &u) - p.running_reward(0.1, &[0.7], &u);
            assert!((diff - a).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.05, 0.05, 0.04]);
        assert!(make_case2_merton(0.02, vec![0.06, 0.06], cov, 0.2, 1.0).is_err());
        let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.0, 0.04]);
        assert!(make_case2_merton(0.02, vec![0.06, 0.06], cov, 0.2, 1.0).is_err());
    }
}

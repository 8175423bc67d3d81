//! Controlled diffusions `dX = b(t,X,u) dt + sigma(t,X,u) dW` with running reward
//! `l(t,x,u)`, terminal reward `g(x)`, optional inequality constraints
//! `g_i(u, x) <= 0`, and the analytic partials the adjoint recursion and the
//! Hamiltonian solver consume.
//!
//! Matrices are flat row-major slices. The diffusion is `d x q`; the partials of
//! its `j`-th column are stored as `q` consecutive `d x d` (state) or `d x m`
//! (control) blocks.

mod lq;
mod merton;

use std::ops::Range;

pub use lq::{make_case1_lq, TargetLq};
pub use merton::{make_case2_merton, make_case3_resource, LogMerton};

/// State, control and noise dimensions `(d, m, q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub control: usize,
    pub noise: usize,
}

impl Dims {
    /// Number of scalars in one block of first partials.
    pub fn partials_len(&self) -> usize {
        let (d, m, q) = (self.state, self.control, self.noise);
        d * d + d * m + q * d * d + q * d * m + d + m
    }

    fn offsets(&self) -> [Range<usize>; 6] {
        let (d, m, q) = (self.state, self.control, self.noise);
        let mut start = 0;
        let mut next = |len: usize| {
            let r = start..start + len;
            start += len;
            r
        };
        [
            next(d * d),
            next(d * m),
            next(q * d * d),
            next(q * d * m),
            next(d),
            next(m),
        ]
    }

    pub fn split<'a>(&self, block: &'a [f64]) -> Partials<'a> {
        let [bx, bu, sx, su, lx, lu] = self.offsets();
        Partials {
            bx: &block[bx],
            bu: &block[bu],
            sx: &block[sx],
            su: &block[su],
            lx: &block[lx],
            lu: &block[lu],
        }
    }

    pub fn split_mut<'a>(&self, block: &'a mut [f64]) -> PartialsMut<'a> {
        let [bx, bu, sx, su, lx, lu] = self.offsets();
        let (bx_s, rest) = block.split_at_mut(bx.len());
        let (bu_s, rest) = rest.split_at_mut(bu.len());
        let (sx_s, rest) = rest.split_at_mut(sx.len());
        let (su_s, rest) = rest.split_at_mut(su.len());
        let (lx_s, rest) = rest.split_at_mut(lx.len());
        let lu_s = &mut rest[..lu.len()];
        PartialsMut {
            bx: bx_s,
            bu: bu_s,
            sx: sx_s,
            su: su_s,
            lx: lx_s,
            lu: lu_s,
        }
    }
}

/// Read-only view of one block of first partials.
#[derive(Clone, Copy, Debug)]
pub struct Partials<'a> {
    /// `d x d`, `bx[i*d + l] = d b_i / d x_l`
    pub bx: &'a [f64],
    /// `d x m`
    pub bu: &'a [f64],
    /// `q` blocks of `d x d`: `sx[(j*d + i)*d + l] = d sigma_ij / d x_l`
    pub sx: &'a [f64],
    /// `q` blocks of `d x m`
    pub su: &'a [f64],
    pub lx: &'a [f64],
    pub lu: &'a [f64],
}

pub struct PartialsMut<'a> {
    pub bx: &'a mut [f64],
    pub bu: &'a mut [f64],
    pub sx: &'a mut [f64],
    pub su: &'a mut [f64],
    pub lx: &'a mut [f64],
    pub lu: &'a mut [f64],
}

/// A named contiguous group of control coordinates, used for per-block error reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlBlock {
    pub name: String,
    pub range: Range<usize>,
}

/// A controlled diffusion with rewards and all partials in closed form.
///
/// Implementations are immutable after construction; every method is pure.
pub trait ControlProblem: Send + Sync {
    fn dims(&self) -> Dims;
    fn horizon(&self) -> f64;

    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `d x q`, row-major.
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn running_reward(&self, t: f64, x: &[f64], u: &[f64]) -> f64;
    fn terminal_reward(&self, x: &[f64]) -> f64;
    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]);

    /// Overwrite every entry of `out` with the first partials at `(t, x, u)`.
    fn partials(&self, t: f64, x: &[f64], u: &[f64], out: PartialsMut<'_>);

    /// `d^2 l / du^2`, `m x m`.
    fn reward_hessian_uu(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `d^2 <p, b> / du^2`, `m x m`.
    fn drift_hessian_uu(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]);
    /// `d^2 <Z, sigma>_F / du^2` for a `d x q` matrix `Z`, `m x m`.
    fn diffusion_hessian_uu(&self, t: f64, x: &[f64], u: &[f64], z: &[f64], out: &mut [f64]);

    /// Whether `sigma` depends on the control.
    fn control_dependent_diffusion(&self) -> bool;

    /// Whether the Hamiltonian maximizer needs the martingale coefficient `Z`.
    /// Defaults to [`Self::control_dependent_diffusion`].
    fn requires_z(&self) -> bool {
        self.control_dependent_diffusion()
    }

    /// Controls that must stay strictly positive. The policy gives them a
    /// softplus head and the Hamiltonian solver works in their logarithm.
    fn positive_controls(&self) -> Vec<bool> {
        vec![false; self.dims().control]
    }

    fn num_constraints(&self) -> usize {
        0
    }

    /// `g_i(u, x)`; feasible when `<= 0`.
    fn constraint(&self, _i: usize, _x: &[f64], _u: &[f64]) -> f64 {
        unreachable!("problem declares no constraints")
    }

    fn constraint_gradient(&self, _i: usize, _x: &[f64], _u: &[f64], _out: &mut [f64]) {
        unreachable!("problem declares no constraints")
    }

    fn constraint_hessian(&self, _i: usize, _x: &[f64], _u: &[f64], _out: &mut [f64]) {
        unreachable!("problem declares no constraints")
    }

    fn control_blocks(&self) -> Vec<ControlBlock> {
        vec![ControlBlock {
            name: "u".into(),
            range: 0..self.dims().control,
        }]
    }

    fn is_feasible(&self, x: &[f64], u: &[f64]) -> bool {
        let positive = self.positive_controls();
        u.iter().zip(&positive).all(|(v, p)| !p || *v > 0.0)
            && (0..self.num_constraints()).all(|i| self.constraint(i, x, u) < 0.0)
    }
}

//! Pontryagin-guided direct policy optimization for stochastic control under
//! non-exponential discounting.
//!
//! Stage 1 trains a feedback policy by pathwise gradient ascent on simulated
//! anchored returns. Stage 2 freezes it, estimates the costate at each query
//! by averaging backpropagated adjoints over anchored sub-rollouts, and
//! maximizes the diagonal Hamiltonian pointwise.

// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod adjoint;
pub mod bench;
pub mod config;
pub mod error;
pub mod kernels;
pub mod output;
pub mod parallel;
pub mod policy;
pub mod problems;
pub mod reference;
pub mod rng;
pub mod rollout;
pub mod stage1;
pub mod stage2;
pub mod stats;

pub use error::{Error, Result};
pub use kernels::{DiscountKernel, ImpatienceProfile, KernelClass, TaxonomyReport};
pub use parallel::Workers;
pub use policy::{Head, InitScheme, InputNormalization, MlpPolicy, MlpSpec, Policy};
pub use problems::{ControlProblem, Dims, LogMerton, TargetLq};
pub use rng::{NoiseSource, NoiseStream};
pub use rollout::Trajectory;

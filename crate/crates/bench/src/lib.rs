//! Fixtures shared by the hot-path benchmarks.

use pgdpo_core::config::{BuiltProblem, RunConfig};
use pgdpo_core::{ControlProblem, ImpatienceProfile, MlpPolicy, NoiseStream};

/// A problem, its kernel and an untrained policy of the default width.
pub struct Fixture {
    pub name: &'static str,
    pub cfg: RunConfig,
    pub built: BuiltProblem,
    pub policy: MlpPolicy,
}

impl Fixture {
    pub fn new(name: &'static str, cfg: RunConfig) -> Self {
        let built = cfg.problem.build().expect("preset problem builds");
        let policy = cfg
            .initial_policy(built.as_dyn(), 0)
            .expect("preset policy builds");
        Fixture {
            name,
            cfg,
            built,
            policy,
        }
    }

    pub fn problem(&self) -> &dyn ControlProblem {
        self.built.as_dyn()
    }

    /// Mid-horizon query at the centre of the evaluation box.
    pub fn query(&self) -> (f64, Vec<f64>) {
        let (lo, hi) = self.cfg.grid_box();
        let x = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| 0.5 * (a + b) + 0.1)
            .collect();
        (0.5 * self.problem().horizon(), x)
    }

    pub fn noise(&self, seed: u64) -> NoiseStream {
        NoiseStream::new(seed, 0, self.problem().dims().noise)
    }
}

/// One fixture per case.
pub fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture::new("case1", RunConfig::case1(0.2)),
        Fixture::new("case2", RunConfig::case2()),
        Fixture::new(
            "case3",
            RunConfig::case3(ImpatienceProfile::default_sinusoidal()),
        ),
    ]
}

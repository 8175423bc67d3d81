//! JSON run configuration: parsing with field paths, per-case defaults,
//! cross-field validation and the canonical hash that keys every output.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::DiscountKernel;
use crate::policy::{Head, InputNormalization, MlpPolicy};
use crate::problems::{
    make_case1_lq, make_case2_merton, make_case3_resource, ControlProblem, LogMerton, TargetLq,
};
use crate::stage1::{AnchorDistribution, AnchorTime, TrainConfig};
use crate::stage2::ProjectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqConfig {
    pub dim: usize,
    /// Defaults to the origin.
    pub target: Option<Vec<f64>>,
    pub state_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
    pub noise: f64,
    pub horizon: f64,
}

impl Default for LqConfig {
    fn default() -> Self {
        LqConfig {
            dim: 1,
            target: None,
            state_weight: 1.0,
            control_weight: 0.5,
            terminal_weight: 1.0,
            noise: 0.2,
            horizon: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MertonConfig {
    pub assets: usize,
    pub rate: f64,
    /// `mu - r 1`; defaults to `0.06` per asset.
    pub excess: Option<Vec<f64>>,
    /// Row-major rows; defaults to `0.04 I`.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub bequest: f64,
    pub horizon: f64,
}

impl Default for MertonConfig {
    fn default() -> Self {
        MertonConfig {
            assets: 5,
            rate: 0.02,
            excess: None,
            covariance: None,
            bequest: 0.2,
            horizon: 1.0,
        }
    }
}

impl MertonConfig {
    pub fn excess_vector(&self) -> Vec<f64> {
        self.excess
            .clone()
            .unwrap_or_else(|| vec![0.06; self.assets])
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        match &self.covariance {
            Some(rows) => {
                let n = rows.len();
                DMatrix::from_fn(n, n, |i, j| rows[i].get(j).copied().unwrap_or(f64::NAN))
            }
            None => DMatrix::from_diagonal_element(self.assets, self.assets, 0.04),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum ProblemConfig {
    Case1(LqConfig),
    Case2(MertonConfig),
    Case3(MertonConfig),
}

/// A constructed benchmark problem.
#[derive(Clone, Debug)]
pub enum BuiltProblem {
    Lq(TargetLq),
    Merton(LogMerton),
}

impl BuiltProblem {
    pub fn as_dyn(&self) -> &dyn ControlProblem {
        match self {
            BuiltProblem::Lq(p) => p,
            BuiltProblem::Merton(p) => p,
        }
    }
}

impl ProblemConfig {
    pub fn label(&self) -> &'static str {
        match self {
            ProblemConfig::Case1(_) => "case1",
            ProblemConfig::Case2(_) => "case2",
            ProblemConfig::Case3(_) => "case3",
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ProblemConfig::Case1(c) => c.horizon,
            ProblemConfig::Case2(c) | ProblemConfig::Case3(c) => c.horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ProblemConfig::Case1(c) => c.dim,
            _ => 1,
        }
    }

    pub fn build(&self) -> Result<BuiltProblem> {
        let wrap = |e: Error| match e {
            Error::InvalidParameter(m) => Error::config(problem_field(&m), m),
            other => other,
        };
        match self {
            ProblemConfig::Case1(c) => {
                let target = c.target.clone().unwrap_or_else(|| vec![0.0; c.dim]);
                if target.len() != c.dim {
                    return Err(Error::config(
                        "problem.target",
                        format!("has {} entries, dim is {}", target.len(), c.dim),
                    ));
                }
                make_case1_lq(
                    target,
                    c.state_weight,
                    c.control_weight,
                    c.terminal_weight,
                    c.noise,
                    c.horizon,
                )
                .map(BuiltProblem::Lq)
                .map_err(wrap)
            }
            ProblemConfig::Case2(c) | ProblemConfig::Case3(c) => {
                let excess = c.excess_vector();
                if excess.len() != c.assets {
                    return Err(Error::config(
                        "problem.excess",
                        format!("has {} entries, assets is {}", excess.len(), c.assets),
                    ));
                }
                if let Some(rows) = &c.covariance {
                    if rows.len() != c.assets || rows.iter().any(|r| r.len() != c.assets) {
                        return Err(Error::config(
                            "problem.covariance",
                            format!("must be {0}x{0}", c.assets),
                        ));
                    }
                }
                let make = if matches!(self, ProblemConfig::Case2(_)) {
                    make_case2_merton
                } else {
                    make_case3_resource
                };
                make(c.rate, excess, c.covariance_matrix(), c.bequest, c.horizon)
                    .map(BuiltProblem::Merton)
                    .map_err(wrap)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// `N_t` times `i T / N_t`, `i = 0..N_t`.
    pub times: usize,
    /// `N_x` points per slice.
    pub points: usize,
    /// Box of the state slices; defaults to the anchor box.
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    /// Seeded random slices through the box centre (state dimension > 1).
    pub random_slices: usize,
    /// Report `L1` as the integral over the grid domain instead of the mean.
    pub measure_weighted: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            times: 8,
            points: 16,
            lo: None,
            hi: None,
            random_slices: 1,
            measure_weighted: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dpo,
    Pgdpo,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Pgdpo => "pgdpo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSettings {
    pub prefix_times: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub fine_dt: f64,
    pub branches: usize,
    pub antithetic: bool,
    /// Anchor state; defaults to the centre of the anchor box shifted by a
    /// quarter of its width.
    pub x0: Option<Vec<f64>>,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        BridgeSettings {
            prefix_times: vec![0.25, 0.5, 0.75],
            step_sizes: vec![1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0],
            fine_dt: 1.0 / 1024.0,
            branches: 4096,
            antithetic: true,
            x0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSettings {
    /// Stage-1 iterations between residual checkpoints.
    pub every: usize,
    pub times: usize,
    pub points: usize,
}

impl Default for ResidualSettings {
    fn default() -> Self {
        ResidualSettings {
            every: 50,
            times: 4,
            points: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub dims: Vec<usize>,
    /// Seed of the generated markets.
    pub market_seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            dims: vec![5, 10, 25],
            market_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSettings {
    /// `(M_MC, N')` pairs.
    pub budgets: Vec<(usize, usize)>,
    pub repetitions: usize,
    pub query_time: f64,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        RuntimeSettings {
            budgets: vec![(256, 16), (1024, 50), (4096, 100)],
            repetitions: 5,
            query_time: 0.0,
        }
    }
}

/// Thresholds enforced by `--check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckThresholds {
    pub stationarity: f64,
    pub case1_l1: f64,
    pub case2_pi_linf: f64,
    pub case2_c_l1: f64,
    pub case3_c_l1: f64,
    pub residual_ratio: f64,
    pub bridge_strict_decrease: bool,
    pub slope_band: (f64, f64),
}

impl Default for CheckThresholds {
    fn default() -> Self {
        CheckThresholds {
            stationarity: 1e-8,
            case1_l1: 5e-2,
            case2_pi_linf: 1e-2,
            case2_c_l1: 1e-2,
            case3_c_l1: 2e-2,
            residual_ratio: 0.1,
            bridge_strict_decrease: true,
            slope_band: (0.8, 1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub kernel: DiscountKernel,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Stage-1 anchor distribution; defaults depend on the case.
    #[serde(default)]
    pub anchors: Option<AnchorDistribution>,
    #[serde(default)]
    pub stage1: TrainConfig,
    #[serde(default)]
    pub stage2: ProjectionConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Worker threads; excluded from the config hash.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Output root; excluded from the config hash.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub bridge: BridgeSettings,
    #[serde(default)]
    pub residual: ResidualSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub runtime: RuntimeSettings,
    #[serde(default)]
    pub check: CheckThresholds,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_methods() -> Vec<Method> {
    vec![Method::Dpo, Method::Pgdpo]
}

fn default_workers() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Field named by a constructor error of the problem block.
fn problem_field(message: &str) -> &'static str {
    const FIELDS: [(&str, &str); 8] = [
        ("control weight", "problem.control_weight"),
        ("state and terminal", "problem.state_weight"),
        ("noise", "problem.noise"),
        ("horizon", "problem.horizon"),
        ("covariance", "problem.covariance"),
        ("bequest", "problem.bequest"),
        ("risky asset", "problem.assets"),
        ("state dimension", "problem.dim"),
    ];
    FIELDS
        .iter()
        .find(|(key, _)| message.contains(key))
        .map_or("problem", |(_, field)| field)
}

/// Field of the kernel block that failed validation.
fn kernel_field(k: &DiscountKernel) -> &'static str {
    match k {
        DiscountKernel::Exponential { .. } => "kernel.rate",
        DiscountKernel::SurvivalGamma { alpha0, .. } if !(alpha0.is_finite() && *alpha0 > 0.0) => {
            "kernel.alpha0"
        }
        DiscountKernel::SurvivalGamma { .. } => "kernel.beta0",
        DiscountKernel::Hyperbolic { .. } => "kernel.kappa",
        DiscountKernel::TimeVaryingHyperbolic { .. } => "kernel.profile",
    }
}

impl RunConfig {
    /// Default configuration of a benchmark case, with the accuracy-run
    /// projection budget `M_MC = 4096`, `N' = 64`.
    pub fn for_case(problem: ProblemConfig, kernel: DiscountKernel) -> Self {
        RunConfig {
            problem,
            kernel,
            policy: PolicyConfig::default(),
            anchors: None,
            stage1: TrainConfig::default(),
            stage2: ProjectionConfig {
                samples: 4096,
                steps: 64,
                ..ProjectionConfig::default()
            },
            grid: GridConfig::default(),
            seeds: default_seeds(),
            methods: default_methods(),
            workers: default_workers(),
            output: default_output(),
            bridge: BridgeSettings::default(),
            residual: ResidualSettings::default(),
            sweep: SweepSettings::default(),
            runtime: RuntimeSettings::default(),
            check: CheckThresholds::default(),
        }
    }

    pub fn case1(beta0: f64) -> Self {
        Self::for_case(
            ProblemConfig::Case1(LqConfig::default()),
            DiscountKernel::SurvivalGamma { alpha0: 1.0, beta0 },
        )
    }

    pub fn case2() -> Self {
        Self::for_case(
            ProblemConfig::Case2(MertonConfig::default()),
            DiscountKernel::Hyperbolic { kappa: 1.0 },
        )
    }

    pub fn case3(profile: crate::kernels::ImpatienceProfile) -> Self {
        Self::for_case(
            ProblemConfig::Case3(MertonConfig::default()),
            DiscountKernel::TimeVaryingHyperbolic { profile },
        )
    }

    /// Parse and validate; every error names the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path.is_empty() { ".".into() } else { path },
                e.inner().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Anchor distribution, filling in the per-case default.
    pub fn anchor_distribution(&self) -> AnchorDistribution {
        if let Some(a) = &self.anchors {
            return a.clone();
        }
        match &self.problem {
            ProblemConfig::Case1(c) => {
                let target = c.target.clone().unwrap_or_else(|| vec![0.0; c.dim]);
                AnchorDistribution {
                    time: AnchorTime::Uniform,
                    fixed_time: 0.0,
                    state_lo: target.iter().map(|v| v - 1.0).collect(),
                    state_hi: target.iter().map(|v| v + 1.0).collect(),
                }
            }
            _ => AnchorDistribution {
                time: AnchorTime::Fixed,
                fixed_time: 0.0,
                state_lo: vec![-0.5],
                state_hi: vec![0.5],
            },
        }
    }

    pub fn grid_box(&self) -> (Vec<f64>, Vec<f64>) {
        let nu = self.anchor_distribution();
        (
            self.grid.lo.clone().unwrap_or(nu.state_lo),
            self.grid.hi.clone().unwrap_or(nu.state_hi),
        )
    }

    /// Fresh Glorot-initialized policy for `seed`, with heads from the
    /// problem's positivity pattern and inputs normalized to the anchor box.
    pub fn initial_policy(&self, problem: &dyn ControlProblem, seed: u64) -> Result<MlpPolicy> {
        let dims = problem.dims();
        let mut widths = vec![1 + dims.state];
        widths.extend(&self.policy.hidden);
        widths.push(dims.control);
        let heads = problem
            .positive_controls()
            .into_iter()
            .map(|p| if p { Head::Softplus } else { Head::Identity })
            .collect();
        let nu = self.anchor_distribution();
        let normalization = InputNormalization {
            t_scale: problem.horizon(),
            x_center: nu
                .state_lo
                .iter()
                .zip(&nu.state_hi)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
            x_scale: nu
                .state_lo
                .iter()
                .zip(&nu.state_hi)
                .map(|(a, b)| if b > a { 0.5 * (b - a) } else { 1.0 })
                .collect(),
        };
        MlpPolicy::init(widths, heads, normalization, seed)
    }

    /// Cross-field checks, run before any work.
    pub fn validate(&self) -> Result<()> {
        let horizon = self.problem.horizon();
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config("problem.horizon", "must be > 0"));
        }
        match &self.problem {
            ProblemConfig::Case1(c) if c.dim == 0 => {
                return Err(Error::config("problem.dim", "must be >= 1"))
            }
            ProblemConfig::Case2(c) | ProblemConfig::Case3(c) if c.assets == 0 => {
                return Err(Error::config("problem.assets", "must be >= 1"))
            }
            _ => {}
        }
        self.problem.build()?;
        self.kernel
            .validate(horizon)
            .map_err(|e| Error::config(kernel_field(&self.kernel), e.to_string()))?;
        let legal = match self.problem {
            ProblemConfig::Case1(_) => self.kernel.is_multiplicative(),
            ProblemConfig::Case2(_) => matches!(self.kernel, DiscountKernel::Hyperbolic { .. }),
            ProblemConfig::Case3(_) => {
                matches!(self.kernel, DiscountKernel::TimeVaryingHyperbolic { .. })
            }
        };
        if !legal {
            let want = match self.problem {
                ProblemConfig::Case1(_) => {
                    "a multiplicative kernel (exponential or survival_gamma)"
                }
                ProblemConfig::Case2(_) => "a hyperbolic kernel",
                ProblemConfig::Case3(_) => "a time_varying_hyperbolic kernel",
            };
            return Err(Error::config(
                "kernel.kind",
                format!(
                    "{} has no reference for {}; use {want}",
                    self.problem.label(),
                    self.kernel.name()
                ),
            ));
        }
        if self.policy.hidden.contains(&0) {
            return Err(Error::config("policy.hidden", "widths must be >= 1"));
        }
        let d = self.problem.state_dim();
        let nu = self.anchor_distribution();
        nu.validate(d, horizon).map_err(|e| e.nested("anchors"))?;
        self.stage1
            .validate(horizon)
            .map_err(|e| e.nested("stage1"))?;
        self.stage2.validate().map_err(|e| e.nested("stage2"))?;
        if self.grid.times == 0 || self.grid.points == 0 {
            return Err(Error::config("grid", "times and points must be >= 1"));
        }
        let (lo, hi) = self.grid_box();
        if lo.len() != d || hi.len() != d {
            return Err(Error::config(
                "grid.lo",
                format!("grid box must have {d} coordinates"),
            ));
        }
        for i in 0..d {
            if !(lo[i] <= hi[i]) {
                return Err(Error::config("grid.hi", "grid box has lo > hi"));
            }
            if lo[i] < nu.state_lo[i] - 1e-12 || hi[i] > nu.state_hi[i] + 1e-12 {
                return Err(Error::config(
                    "grid",
                    "grid box leaves the anchor distribution's support",
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        let b = &self.bridge;
        if !(b.fine_dt > 0.0) || b.branches < 2 || (b.antithetic && !b.branches.is_multiple_of(2)) {
            return Err(Error::config(
                "bridge",
                "needs fine_dt > 0 and an even branch count >= 2",
            ));
        }
        for (i, &dt) in b.step_sizes.iter().enumerate() {
            let r = dt / b.fine_dt;
            if !(dt > 0.0) || (r - r.round()).abs() > 1e-9 {
                return Err(Error::config(
                    format!("bridge.step_sizes[{i}]"),
                    "must be a positive multiple of fine_dt",
                ));
            }
        }
        for (i, &t) in b.prefix_times.iter().enumerate() {
            if !(t >= 0.0 && t < horizon) {
                return Err(Error::config(
                    format!("bridge.prefix_times[{i}]"),
                    "must lie in [0, T)",
                ));
            }
        }
        if b.x0.as_ref().is_some_and(|x| x.len() != d) {
            return Err(Error::config(
                "bridge.x0",
                format!("must have {d} coordinates"),
            ));
        }
        if self.residual.every == 0 || self.residual.times == 0 || self.residual.points == 0 {
            return Err(Error::config(
                "residual",
                "every, times and points must be >= 1",
            ));
        }
        if self.sweep.dims.contains(&0) {
            return Err(Error::config("sweep.dims", "dimensions must be >= 1"));
        }
        for (i, (m, n)) in self.runtime.budgets.iter().enumerate() {
            if *m == 0 || *n == 0 || (self.stage2.antithetic && m % 2 != 0) {
                return Err(Error::config(
                    format!("runtime.budgets[{i}]"),
                    "M_MC and N' must be >= 1 (M_MC even when antithetic)",
                ));
            }
        }
        if !(self.runtime.query_time >= 0.0 && self.runtime.query_time < horizon) {
            return Err(Error::config("runtime.query_time", "must lie in [0, T)"));
        }
        let (s_lo, s_hi) = self.check.slope_band;
        if !(s_lo <= s_hi) {
            return Err(Error::config(
                "check.slope_band",
                "lower bound exceeds upper bound",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with `workers` and `output` removed,
    /// truncated to 16 hex digits.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("workers");
            map.remove("output");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

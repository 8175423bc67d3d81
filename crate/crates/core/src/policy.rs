//! Feedback policies `u(t, x)`.
//!
//! [`MlpPolicy`] is a tanh multilayer perceptron with hand-written forward,
//! forward-mode state-Jacobian and reverse (parameter) passes. Its input is
//! `[t / t_scale, (x - x_center) / x_scale]`; each output goes through an
//! identity or softplus head.
//!
//! Parameter layout of layer `l` (`n_in -> n_out`): the weight matrix stored
//! column-major (`w[j * n_out + i]` multiplies input `j` into output `i`),
//! followed by `n_out` biases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that maps `(t, x)` to a control, with a state Jacobian.
pub trait Policy: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Write `u(t, x)` into `u` and, if requested, the `m x d` row-major
    /// Jacobian `du/dx` into `jac`.
    fn evaluate(
        &self,
        t: f64,
        x: &[f64],
        u: &mut [f64],
        jac: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) -> Result<()>;

    fn act(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut u = vec![0.0; self.control_dim()];
        self.evaluate(t, x, &mut u, None, &mut Vec::new())?;
        Ok(u)
    }

    fn state_jacobian(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut u = vec![0.0; self.control_dim()];
        let mut jac = vec![0.0; self.control_dim() * self.state_dim()];
        self.evaluate(t, x, &mut u, Some(&mut jac), &mut Vec::new())?;
        Ok(jac)
    }
}

/// Output transform applied to one raw network output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    /// `log(1 + e^z)`, strictly positive.
    Softplus,
}

impl Head {
    #[inline]
    fn apply(self, z: f64) -> (f64, f64) {
        match self {
            Head::Identity => (z, 1.0),
            Head::Softplus => {
                let value = z.max(0.0) + (-z.abs()).exp().ln_1p();
                let slope = 1.0 / (1.0 + (-z).exp());
                (value, slope)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub t_scale: f64,
    pub x_center: Vec<f64>,
    pub x_scale: Vec<f64>,
}

impl InputNormalization {
    pub fn identity(state_dim: usize) -> Self {
        InputNormalization {
            t_scale: 1.0,
            x_center: vec![0.0; state_dim],
            x_scale: vec![1.0; state_dim],
        }
    }
}

/// Architecture and metadata; also the JSON header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[1 + d, hidden..., m]`
    pub widths: Vec<usize>,
    pub heads: Vec<Head>,
    pub normalization: InputNormalization,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Glorot-uniform weights, zero biases.
    GlorotUniform,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy {
    spec: MlpSpec,
    params: Vec<f64>,
    /// Start of each layer's weight block in `params`.
    offsets: Vec<usize>,
}

const CHECKPOINT_FORMAT: &str = "pgdpo-policy-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    num_params: usize,
    #[serde(flatten)]
    spec: MlpSpec,
}

fn layer_offsets(widths: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(widths.len().saturating_sub(1));
    let mut total = 0;
    for w in widths.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

impl MlpPolicy {
    pub fn new(spec: MlpSpec, scheme: InitScheme) -> Result<Self> {
        Self::validate(&spec)?;
        let (offsets, total) = layer_offsets(&spec.widths);
        let mut params = vec![0.0; total];
        if scheme == InitScheme::GlorotUniform {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for (l, w) in spec.widths.windows(2).enumerate() {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let start = offsets[l];
                for p in &mut params[start..start + w[0] * w[1]] {
                    *p = dist.sample(&mut rng);
                }
            }
        }
        Ok(MlpPolicy {
            spec,
            params,
            offsets,
        })
    }

    /// Glorot-uniform initialization, reproducible from `seed`.
    pub fn init(
        widths: Vec<usize>,
        heads: Vec<Head>,
        normalization: InputNormalization,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            MlpSpec {
                widths,
                heads,
                normalization,
                seed,
            },
            InitScheme::GlorotUniform,
        )
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        Self::validate(&spec)?;
        let (offsets, total) = layer_offsets(&spec.widths);
        if params.len() != total {
            return Err(Error::InvalidParameter(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(MlpPolicy {
            spec,
            params,
            offsets,
        })
    }

    fn validate(spec: &MlpSpec) -> Result<()> {
        let w = &spec.widths;
        if w.len() < 2 || w.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "invalid layer widths {w:?}"
            )));
        }
        let d = w[0] - 1;
        let m = *w.last().unwrap();
        if spec.heads.len() != m {
            return Err(Error::InvalidParameter(format!(
                "{} heads for {m} outputs",
                spec.heads.len()
            )));
        }
        let norm = &spec.normalization;
        if norm.x_center.len() != d || norm.x_scale.len() != d {
            return Err(Error::InvalidParameter(
                "normalization constants do not match the state dimension".into(),
            ));
        }
        if !(norm.t_scale > 0.0) || norm.x_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter(
                "normalization scales must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn num_layers(&self) -> usize {
        self.spec.widths.len() - 1
    }

    /// Scratch layout: activations `a_0..a_L` (a_L holds the raw output),
    /// then per-layer pre-activation derivatives.
    fn act_offsets(&self) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.spec.widths.len());
        let mut total = 0;
        for &w in &self.spec.widths {
            offs.push(total);
            total += w;
        }
        (offs, total)
    }

    /// Forward pass storing activations in `scratch[..act_len]`; returns the
    /// activation offsets.
    fn forward(&self, t: f64, x: &[f64], scratch: &mut Vec<f64>) -> Result<Vec<usize>> {
        let (offs, act_len) = self.act_offsets();
        let d = self.state_dim();
        if scratch.len() < act_len {
            scratch.resize(act_len, 0.0);
        }
        let norm = &self.spec.normalization;
        scratch[0] = t / norm.t_scale;
        for j in 0..d {
            scratch[1 + j] = (x[j] - norm.x_center[j]) / norm.x_scale[j];
        }
        let layers = self.num_layers();
        for l in 0..layers {
            let (n_in, n_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let w = &self.params[self.offsets[l]..self.offsets[l] + n_in * n_out];
            let b = &self.params
                [self.offsets[l] + n_in * n_out..self.offsets[l] + n_in * n_out + n_out];
            let (head, tail) = scratch.split_at_mut(offs[l + 1]);
            let input = &head[offs[l]..offs[l] + n_in];
            let out = &mut tail[..n_out];
            out.copy_from_slice(b);
            for (j, &a) in input.iter().enumerate() {
                let col = &w[j * n_out..(j + 1) * n_out];
                for (o, &wij) in out.iter_mut().zip(col) {
                    *o += a * wij;
                }
            }
            if l + 1 < layers {
                for o in out.iter_mut() {
                    *o = o.tanh();
                }
            }
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
        }
        Ok(offs)
    }

    /// Accumulate `(du/dtheta)^T cot` into `grad` and, if requested, write
    /// `(du/dx)^T cot` into `grad_x`.
    pub fn backward(
        &self,
        t: f64,
        x: &[f64],
        cot: &[f64],
        grad: &mut [f64],
        grad_x: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        let offs = self.forward(t, x, scratch)?;
        let widths = &self.spec.widths;
        let layers = self.num_layers();
        let max_w = *widths.iter().max().unwrap();
        let base = offs[layers] + widths[layers];
        if scratch.len() < base + 2 * max_w {
            scratch.resize(base + 2 * max_w, 0.0);
        }
        let (acts, work) = scratch.split_at_mut(base);
        let (delta, next) = work.split_at_mut(max_w);

        let m = widths[layers];
        let raw = &acts[offs[layers]..offs[layers] + m];
        for i in 0..m {
            let (_, slope) = self.spec.heads[i].apply(raw[i]);
            delta[i] = cot[i] * slope;
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w_off = self.offsets[l];
            let input = &acts[offs[l]..offs[l] + n_in];
            let dl = &delta[..n_out];
            for (j, &a) in input.iter().enumerate() {
                let g = &mut grad[w_off + j * n_out..w_off + (j + 1) * n_out];
                for (gi, &di) in g.iter_mut().zip(dl) {
                    *gi += a * di;
                }
            }
            let gb = &mut grad[w_off + n_in * n_out..w_off + n_in * n_out + n_out];
            for (gi, &di) in gb.iter_mut().zip(dl) {
                *gi += di;
            }
            let w = &self.params[w_off..w_off + n_in * n_out];
            for j in 0..n_in {
                let col = &w[j * n_out..(j + 1) * n_out];
                next[j] = col.iter().zip(dl).map(|(a, b)| a * b).sum();
            }
            if l > 0 {
                for j in 0..n_in {
                    let a = input[j];
                    next[j] *= 1.0 - a * a;
                }
            }
            delta[..n_in].copy_from_slice(&next[..n_in]);
        }
        if let Some(gx) = grad_x {
            let norm = &self.spec.normalization;
            for (j, g) in gx.iter_mut().enumerate() {
                *g = delta[1 + j] / norm.x_scale[j];
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Checkpoint layout: one line of JSON header, `\n`, then the parameters
    /// as little-endian `f64`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            num_params: self.params.len(),
            spec: self.spec.clone(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::InvalidParameter("checkpoint header is not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidParameter(format!(
                "unknown checkpoint format {}",
                header.format
            )));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.num_params * 8 {
            return Err(Error::InvalidParameter(format!(
                "checkpoint body holds {} bytes, expected {}",
                body.len(),
                header.num_params * 8
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(header.spec, params)
    }
}

impl Policy for MlpPolicy {
    fn state_dim(&self) -> usize {
        self.spec.widths[0] - 1
    }

    fn control_dim(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    fn evaluate(
        &self,
        t: f64,
        x: &[f64],
        u: &mut [f64],
        jac: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        let offs = self.forward(t, x, scratch)?;
        let widths = &self.spec.widths;
        let layers = self.num_layers();
        let m = widths[layers];
        let raw_off = offs[layers];
        let mut slopes = [0.0f64; 32];
        let mut slopes_vec;
        let slopes: &mut [f64] = if m <= 32 {
            &mut slopes[..m]
        } else {
            slopes_vec = vec![0.0; m];
            &mut slopes_vec
        };
        for i in 0..m {
            let (v, s) = self.spec.heads[i].apply(scratch[raw_off + i]);
            u[i] = v;
            slopes[i] = s;
        }
        let Some(jac) = jac else {
            return Ok(());
        };

        // forward-mode tangents, one contiguous vector per state direction
        let d = self.state_dim();
        let max_w = *widths.iter().max().unwrap();
        let base = raw_off + m;
        if scratch.len() < base + 2 * d * max_w {
            scratch.resize(base + 2 * d * max_w, 0.0);
        }
        let (acts, work) = scratch.split_at_mut(base);
        let (mut cur, mut nxt) = work.split_at_mut(d * max_w);
        let norm = &self.spec.normalization;
        // layer 0: tangent of the normalized input along x_k is e_{1+k} / x_scale_k
        {
            let (n_in, n_out) = (widths[0], widths[1]);
            let w = &self.params[self.offsets[0]..self.offsets[0] + n_in * n_out];
            for k in 0..d {
                let col = &w[(1 + k) * n_out..(2 + k) * n_out];
                let inv = 1.0 / norm.x_scale[k];
                for (c, &wv) in cur[k * max_w..k * max_w + n_out].iter_mut().zip(col) {
                    *c = wv * inv;
                }
            }
        }
        for l in 1..layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let a = &acts[offs[l]..offs[l] + n_in];
            let w = &self.params[self.offsets[l]..self.offsets[l] + n_in * n_out];
            for k in 0..d {
                let tin = &mut cur[k * max_w..k * max_w + n_in];
                for (ti, &ai) in tin.iter_mut().zip(a) {
                    *ti *= 1.0 - ai * ai;
                }
                let tout = &mut nxt[k * max_w..k * max_w + n_out];
                tout.fill(0.0);
                for (j, &tj) in tin.iter().enumerate() {
                    let col = &w[j * n_out..(j + 1) * n_out];
                    for (o, &wv) in tout.iter_mut().zip(col) {
                        *o += tj * wv;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut nxt);
        }
        for i in 0..m {
            for k in 0..d {
                jac[i * d + k] = slopes[i] * cur[k * max_w + i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: Vec<usize>, heads: Vec<Head>) -> MlpSpec {
        let d = widths[0] - 1;
        MlpSpec {
            widths,
            heads,
            normalization: InputNormalization::identity(d),
            seed: 7,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpPolicy::new(
            spec(vec![3, 8, 8, 2], vec![Head::Identity; 2]),
            InitScheme::Zeros,
        )
        .unwrap();
        assert_eq!(p.act(0.3, &[0.1, -0.4]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(p.state_jacobian(0.3, &[0.1, -0.4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn output_bias_passes_through() {
        let mut p = MlpPolicy::new(
            spec(vec![2, 4, 4, 2], vec![Head::Identity; 2]),
            InitScheme::Zeros,
        )
        .unwrap();
        let n = p.num_params();
        p.params_mut()[n - 2] = 0.7;
        p.params_mut()[n - 1] = -1.25;
        assert_eq!(p.act(0.0, &[3.0]).unwrap(), vec![0.7, -1.25]);
    }

    #[test]
    fn softplus_head_at_zero() {
        let p = MlpPolicy::new(
            spec(vec![2, 4, 4, 3], vec![Head::Softplus; 3]),
            InitScheme::Zeros,
        )
        .unwrap();
        for v in p.act(0.5, &[1.0]).unwrap() {
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_policy_jacobian_is_weight_block() {
        // no hidden layer: u = W [t, x] + b
        let mut p =
            MlpPolicy::new(spec(vec![3, 2], vec![Head::Identity; 2]), InitScheme::Zeros).unwrap();
        // column-major: column j holds weights of input j
        p.params_mut()[..6].copy_from_slice(&[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
        let jac = p.state_jacobian(0.2, &[0.5, 0.5]).unwrap();
        // row i, column k: weight of input 1+k into output i
        assert_eq!(jac, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn seeds_control_initialization() {
        let a = MlpPolicy::init(
            vec![2, 16, 16, 1],
            vec![Head::Identity],
            InputNormalization::identity(1),
            3,
        )
        .unwrap();
        let b = MlpPolicy::init(
            vec![2, 16, 16, 1],
            vec![Head::Identity],
            InputNormalization::identity(1),
            3,
        )
        .unwrap();
        let c = MlpPolicy::init(
            vec![2, 16, 16, 1],
            vec![Head::Identity],
            InputNormalization::identity(1),
            4,
        )
        .unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn glorot_variance() {
        let fan_in = 100;
        let fan_out = 100;
        let p = MlpPolicy::init(
            vec![fan_in, fan_out, 1],
            vec![Head::Identity],
            InputNormalization::identity(fan_in - 1),
            11,
        )
        .unwrap();
        let w = &p.params()[..fan_in * fan_out];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / (fan_in + fan_out) as f64;
        assert!(
            (var / target - 1.0).abs() < 0.1,
            "var {var} target {target}"
        );
    }

    #[test]
    fn nonfinite_activation_reports_layer() {
        let mut p =
            MlpPolicy::new(spec(vec![2, 3, 1], vec![Head::Identity]), InitScheme::Zeros).unwrap();
        p.params_mut()[0] = f64::NAN;
        assert!(matches!(
            p.act(1.0, &[0.0]),
            Err(Error::NonFinite { layer: 0 })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = MlpPolicy::init(
            vec![3, 5, 2],
            vec![Head::Identity, Head::Softplus],
            InputNormalization {
                t_scale: 2.0,
                x_center: vec![0.1, 0.2],
                x_scale: vec![1.5, 0.5],
            },
            9,
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = MlpPolicy::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let body = &buf[buf.iter().position(|&b| b == b'\n').unwrap() + 1..];
        assert_eq!(body.len(), 8 * p.num_params());
        assert_eq!(&body[..8], &p.params()[0].to_le_bytes());
    }

    #[test]
    fn mismatched_heads_rejected() {
        assert!(
            MlpPolicy::new(spec(vec![2, 3, 2], vec![Head::Identity]), InitScheme::Zeros).is_err()
        );
    }
}

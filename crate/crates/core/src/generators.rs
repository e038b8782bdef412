//! Trainable splitting-ratio and watermark-logit generators.
//!
//! Each generator is a two-layer perceptron mapping a preceding-token
//! embedding to a scalar: the gamma kind squashes through a sigmoid (clamped
//! into the usable splitting-ratio band), the delta kind through a softplus
//! so watermark logits stay positive. Backpropagation is exact and manual;
//! gradient buffers are plain flat vectors in a documented order.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{clamp_gamma, sigmoid, GAMMA_MAX, GAMMA_MIN};
use crate::rng::SplitMix64;

/// Default hidden width.
pub const DEFAULT_HIDDEN: usize = 64;
/// Default LeakyReLU negative slope.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
/// Scale applied to the output layer at initialization so a fresh net starts
/// as a near-constant function of its input.
const INIT_OUTPUT_SCALE: f64 = 1e-2;

static NET_IDS: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GeneratorKind {
    Gamma,
    Delta,
}

/// Two-layer MLP with explicit parameter vectors.
///
/// Flat parameter order (used by checkpoints and gradient vectors alike):
/// `w1` row-major, `b1`, `w2`, `b2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub kind: GeneratorKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub leaky_slope: f64,
    /// `hidden_dim x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    #[serde(skip, default = "next_net_id")]
    uid: u64,
    #[serde(skip)]
    version: u64,
}

fn next_net_id() -> u64 {
    NET_IDS.fetch_add(1, Ordering::Relaxed)
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_uid: u64,
    net_version: u64,
    input: Vec<f64>,
    pre_act: Vec<f64>,
    raw: f64,
    /// Gamma kind only: sigmoid output landed outside the clamp band.
    clamped: bool,
}

/// Gradients of a scalar loss w.r.t. one net's parameters and its input.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub input: Vec<f64>,
}

/// Overflow-safe softplus.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus: ln(exp(y) - 1).
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl GeneratorNet {
    fn zeroed(kind: GeneratorKind, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
            uid: next_net_id(),
            version: 0,
        }
    }

    fn check_target(kind: GeneratorKind, target: f64) -> Result<()> {
        match kind {
            GeneratorKind::Gamma if !(target > 0.0 && target < 1.0) => Err(Error::Config(format!(
                "gamma target must lie in (0,1), got {target}"
            ))),
            GeneratorKind::Delta if target <= 0.0 => Err(Error::Config(format!(
                "delta target must be positive, got {target}"
            ))),
            _ => Ok(()),
        }
    }

    fn target_bias(kind: GeneratorKind, target: f64) -> f64 {
        match kind {
            GeneratorKind::Gamma => (target / (1.0 - target)).ln(),
            GeneratorKind::Delta => softplus_inverse(target),
        }
    }

    /// Exactly-constant net: zero weights, bias set to the inverse activation
    /// of `target`. Useful as a fixed-parameter baseline.
    pub fn constant(kind: GeneratorKind, target: f64, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        Self::check_target(kind, target)?;
        let mut net = Self::zeroed(kind, input_dim, hidden_dim);
        net.b2 = Self::target_bias(kind, target);
        Ok(net)
    }

    /// Kaiming-initialized net whose initial output sits at `target` (within
    /// about 0.01 for unit-norm inputs): the output layer is down-scaled and
    /// the output bias carries the target.
    pub fn init_to_constant(
        kind: GeneratorKind,
        target: f64,
        init_seed: u64,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        Self::check_target(kind, target)?;
        let mut net = Self::zeroed(kind, input_dim, hidden_dim);
        let mut rng = SplitMix64::new(init_seed);
        let std1 = (2.0 / input_dim as f64).sqrt();
        for w in &mut net.w1 {
            *w = std1 * rng.next_gaussian();
        }
        for b in &mut net.b1 {
            *b = std1 * rng.next_gaussian();
        }
        let std2 = (2.0 / hidden_dim as f64).sqrt();
        for w in &mut net.w2 {
            *w = INIT_OUTPUT_SCALE * std2 * rng.next_gaussian();
        }
        net.b2 = Self::target_bias(kind, target);
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim + self.hidden_dim + 1
    }

    /// Scalar output plus the cache needed by [`GeneratorNet::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(f64, ForwardCache)> {
        if input.len() != self.input_dim {
            return Err(Error::Input(format!(
                "input length {} does not match input_dim {}",
                input.len(),
                self.input_dim
            )));
        }
        let h = self.hidden_dim;
        let d = self.input_dim;
        let mut pre_act = vec![0.0; h];
        for j in 0..h {
            let row = &self.w1[j * d..(j + 1) * d];
            let mut acc = self.b1[j];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            pre_act[j] = acc;
        }
        let mut raw = self.b2;
        for j in 0..h {
            let a = pre_act[j];
            let hid = if a >= 0.0 { a } else { self.leaky_slope * a };
            raw += self.w2[j] * hid;
        }
        let (out, clamped) = match self.kind {
            GeneratorKind::Gamma => {
                let s = sigmoid(raw);
                (clamp_gamma(s), !(GAMMA_MIN..=GAMMA_MAX).contains(&s))
            }
            GeneratorKind::Delta => (softplus(raw), false),
        };
        Ok((
            out,
            ForwardCache {
                net_uid: self.uid,
                net_version: self.version,
                input: input.to_vec(),
                pre_act,
                raw,
                clamped,
            },
        ))
    }

    /// Output only, when no gradient is needed.
    pub fn output(&self, input: &[f64]) -> Result<f64> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Exact reverse-mode gradients given `upstream = dL/d(output)`.
    ///
    /// Clamped gamma outputs get zero gradient; LeakyReLU uses `leaky_slope`
    /// on negative pre-activations.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Result<NetGradients> {
        if cache.net_uid != self.uid || cache.net_version != self.version {
            return Err(Error::Usage(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        let h = self.hidden_dim;
        let d = self.input_dim;
        let d_raw = upstream
            * match self.kind {
                GeneratorKind::Gamma => {
                    if cache.clamped {
                        0.0
                    } else {
                        let s = sigmoid(cache.raw);
                        s * (1.0 - s)
                    }
                }
                GeneratorKind::Delta => sigmoid(cache.raw),
            };
        let mut grads = NetGradients {
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w2: vec![0.0; h],
            b2: d_raw,
            input: vec![0.0; d],
        };
        for j in 0..h {
            let a = cache.pre_act[j];
            let hid = if a >= 0.0 { a } else { self.leaky_slope * a };
            grads.w2[j] = d_raw * hid;
            let d_a = d_raw * self.w2[j] * if a >= 0.0 { 1.0 } else { self.leaky_slope };
            grads.b1[j] = d_a;
            let row = &self.w1[j * d..(j + 1) * d];
            for i in 0..d {
                grads.w1[j * d + i] = d_a * cache.input[i];
                grads.input[i] += d_a * row[i];
            }
        }
        Ok(grads)
    }

    /// Appends the parameters in flat order.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
    }

    /// Overwrites the parameters from a flat slice; returns values consumed.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let n = self.param_count();
        if flat.len() < n {
            return Err(Error::Input(format!(
                "flat parameter slice too short: {} < {n}",
                flat.len()
            )));
        }
        let (wd, hd) = (self.hidden_dim * self.input_dim, self.hidden_dim);
        self.w1.copy_from_slice(&flat[..wd]);
        self.b1.copy_from_slice(&flat[wd..wd + hd]);
        self.w2.copy_from_slice(&flat[wd + hd..wd + 2 * hd]);
        self.b2 = flat[wd + 2 * hd];
        self.version += 1;
        Ok(n)
    }
}

/// Appends one net's gradients in the flat parameter order.
pub fn flatten_gradients_into(grads: &NetGradients, out: &mut Vec<f64>) {
    out.extend_from_slice(&grads.w1);
    out.extend_from_slice(&grads.b1);
    out.extend_from_slice(&grads.w2);
    out.push(grads.b2);
}

/// Flat parameter vector of a (gamma, delta) pair: gamma net first.
pub fn flatten_pair(gamma: &GeneratorNet, delta: &GeneratorNet) -> Vec<f64> {
    let mut out = Vec::with_capacity(gamma.param_count() + delta.param_count());
    gamma.flatten_into(&mut out);
    delta.flatten_into(&mut out);
    out
}

/// Writes a flat vector back into a (gamma, delta) pair.
pub fn assign_pair(gamma: &mut GeneratorNet, delta: &mut GeneratorNet, flat: &[f64]) -> Result<()> {
    let used = gamma.assign_flat(flat)?;
    let used2 = delta.assign_flat(&flat[used..])?;
    if used + used2 != flat.len() {
        return Err(Error::Input(format!(
            "flat parameter vector length {} does not match pair size {}",
            flat.len(),
            used + used2
        )));
    }
    Ok(())
}

/// Checkpoint file layout. Parameters are stored per net in the flat order
/// `w1` (row-major), `b1`, `w2`, `b2`, gamma net first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: usize,
    pub gamma: GeneratorNet,
    pub delta: GeneratorNet,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(step: usize, gamma: GeneratorNet, delta: GeneratorNet) -> Self {
        Self { format_version: CHECKPOINT_FORMAT_VERSION, step, gamma, delta }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        if ck.gamma.kind != GeneratorKind::Gamma || ck.delta.kind != GeneratorKind::Delta {
            return Err(Error::Config("checkpoint nets have swapped kinds".into()));
        }
        Ok(ck)
    }
}

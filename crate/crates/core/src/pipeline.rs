//! Watermarked autoregressive generation.
//!
//! Two paths share one loop shape. The hard path biases green-token logits
//! by the emitted watermark logit and samples; it is what inference uses.
//! The soft path replaces the hard membership with a Gumbel-Softmax
//! relaxation and records a [`RolloutTrace`] carrying everything the losses
//! need to differentiate through the rollout.
//!
//! The relaxation is coupled to the hard partition: for each token the
//! Gumbel pair is sampled top-down so that its argmax reproduces the hard
//! membership drawn from the same per-token uniform, while the magnitudes
//! come from the dedicated noise stream. The biased probability mass
//! therefore lands on the realized green list, and the recorded green mass
//! responds to the watermark logit the way the detector will.

use crate::error::{Error, Result};
use crate::generators::GeneratorNet;
use crate::lm::{sample_index, softmax, Origin, SyntheticLM, TokenSeq};
use crate::partition::{
    clamp_gamma, hard_membership, membership_unit, soft_membership, step_seed, PartitionKey,
};
use crate::rng::SplitMix64;

/// Adds `membership_v * delta` to each logit.
///
/// The hard path passes memberships in {0,1}, the soft path passes the
/// relaxed values in (0,1).
pub fn bias_logits(logits: &[f64], membership: &[f64], delta: f64) -> Result<Vec<f64>> {
    if logits.len() != membership.len() {
        return Err(Error::Input(format!(
            "logits length {} does not match membership length {}",
            logits.len(),
            membership.len()
        )));
    }
    if delta < 0.0 {
        return Err(Error::Input(format!("watermark logit must be nonnegative, got {delta}")));
    }
    Ok(logits.iter().zip(membership).map(|(l, y)| l + y * delta).collect())
}

/// Gumbel pair whose argmax over `(ln gamma + g0, ln(1-gamma) + g1)` equals
/// the hard membership verdict `u_hard < gamma`.
///
/// Top-down construction: the winner's shifted value is the maximum
/// `M = -ln(-ln u1)` (the two location terms sum to one, so the max of the
/// shifted pair is a standard Gumbel), and the loser is drawn from a Gumbel
/// truncated at `M` using `u2`.
pub fn coupled_gumbel_pair(gamma: f64, u_hard: f64, u1: f64, u2: f64) -> (f64, f64) {
    let gamma = clamp_gamma(gamma);
    let a_green = gamma.ln();
    let a_red = (1.0 - gamma).ln();
    let max_value = -(-u1.ln()).ln();
    let green_wins = u_hard < gamma;
    let (a_win, a_lose) = if green_wins { (a_green, a_red) } else { (a_red, a_green) };
    let g_win = max_value - a_win;
    // Inverse-CDF draw from Gumbel(a_lose) truncated to values <= max_value.
    let g_lose = -((a_lose - max_value).exp() - u2.ln()).ln();
    if green_wins {
        (g_win, g_lose)
    } else {
        (g_lose, g_win)
    }
}

/// Hard-path generation output: the watermarked continuation plus the
/// per-step quantities a detector should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Continuation only (the prompt is not echoed), tagged WATERMARKED.
    pub seq: TokenSeq,
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Whether each chosen token fell in its step's green list.
    pub green_flags: Vec<bool>,
}

/// Watermarked generation with hard Bernoulli memberships.
pub fn generate_watermarked(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    key: PartitionKey,
    prompt: &TokenSeq,
    length: usize,
    gen_seed: u64,
) -> Result<GenerationOutput> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must be nonempty".into()));
    }
    if length < 1 {
        return Err(Error::Input("generation length must be >= 1".into()));
    }
    prompt.validate_vocab(model.vocab_size())?;
    let v_total = model.vocab_size();
    let mut rng = SplitMix64::new(gen_seed);
    let mut prev = *prompt.tokens.last().expect("nonempty prompt");
    let mut tokens = Vec::with_capacity(length);
    let mut gammas = Vec::with_capacity(length);
    let mut deltas = Vec::with_capacity(length);
    let mut green_flags = Vec::with_capacity(length);
    let mut membership = vec![0.0f64; v_total];
    for _ in 0..length {
        let e = model.embed(prev)?;
        let gamma = gamma_net.output(e)?;
        let delta = delta_net.output(e)?;
        let seed = step_seed(key, prev);
        for (v, m) in membership.iter_mut().enumerate() {
            *m = if hard_membership(seed, v as u32, gamma)? { 1.0 } else { 0.0 };
        }
        let biased = bias_logits(&model.logits(prev)?, &membership, delta)?;
        let probs = softmax(&biased);
        let next = sample_index(&probs, rng.next_unit()) as u32;
        tokens.push(next);
        gammas.push(gamma);
        deltas.push(delta);
        green_flags.push(membership[next as usize] == 1.0);
        prev = next;
    }
    Ok(GenerationOutput {
        seq: TokenSeq::new(tokens, Origin::Watermarked)?,
        gammas,
        deltas,
        green_flags,
    })
}

/// One step of a soft rollout: frozen skeleton plus differentiable values.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    /// Preceding token (input to both generators and the partition seed).
    pub prev: u32,
    /// Token sampled at this step.
    pub token: u32,
    pub gamma: f64,
    pub delta: f64,
    /// Realized hard green list for this step's seed and gamma.
    pub green: Vec<bool>,
    /// Frozen Gumbel pairs, one per vocabulary token.
    pub noise: Vec<(f64, f64)>,
    /// Relaxed memberships, one per vocabulary token.
    pub soft: Vec<f64>,
    /// Modified probability vector (softmax of biased logits).
    pub probs: Vec<f64>,
    /// Probability mass on the realized green list.
    pub green_mass: f64,
    /// Probability-weighted embedding of this step's distribution.
    pub expected_embedding: Vec<f64>,
    /// Whether the sampled token fell in the green list.
    pub chosen_green: bool,
}

/// Differentiable record of a training rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub prompt: Vec<u32>,
    pub gen_seed: u64,
    pub noise_seed: u64,
    pub tau: f64,
    pub steps: Vec<RolloutStep>,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Generated tokens, in order.
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn to_seq(&self) -> Result<TokenSeq> {
        TokenSeq::new(self.tokens(), Origin::Watermarked)
    }
}

/// Soft (training-path) rollout recording a full trace.
///
/// The sampled prefix is treated as data: gradients flow through each step's
/// distribution but not through the discrete token choices feeding later
/// steps.
#[allow(clippy::too_many_arguments)]
pub fn soft_rollout(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    key: PartitionKey,
    prompt: &TokenSeq,
    length: usize,
    tau: f64,
    gen_seed: u64,
    noise_seed: u64,
) -> Result<RolloutTrace> {
    if tau <= 0.0 {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    if prompt.is_empty() {
        return Err(Error::Input("prompt must be nonempty".into()));
    }
    if length < 1 {
        return Err(Error::Input("generation length must be >= 1".into()));
    }
    prompt.validate_vocab(model.vocab_size())?;
    let v_total = model.vocab_size();
    let dim = model.embed_dim();
    let mut gen_rng = SplitMix64::new(gen_seed);
    let mut noise_rng = SplitMix64::new(noise_seed);
    let mut prev = *prompt.tokens.last().expect("nonempty prompt");
    let mut steps = Vec::with_capacity(length);
    for _ in 0..length {
        let e = model.embed(prev)?;
        let gamma = gamma_net.output(e)?;
        let delta = delta_net.output(e)?;
        let seed = step_seed(key, prev);
        let logits = model.logits(prev)?;
        let mut green = vec![false; v_total];
        let mut noise = vec![(0.0, 0.0); v_total];
        let mut soft = vec![0.0; v_total];
        let mut biased = vec![0.0; v_total];
        for v in 0..v_total {
            let u_hard = membership_unit(seed, v as u32);
            green[v] = u_hard < gamma;
            let u1 = noise_rng.next_unit();
            let u2 = noise_rng.next_unit();
            let (g0, g1) = coupled_gumbel_pair(gamma, u_hard, u1, u2);
            noise[v] = (g0, g1);
            soft[v] = soft_membership(gamma, tau, g0, g1)?.value;
            biased[v] = logits[v] + soft[v] * delta;
        }
        let probs = softmax(&biased);
        let green_mass = probs
            .iter()
            .zip(&green)
            .filter(|(_, &g)| g)
            .map(|(p, _)| p)
            .sum();
        let mut expected_embedding = vec![0.0; dim];
        for (v, p) in probs.iter().enumerate() {
            let row = model.embeddings().row(v as u32);
            for (acc, x) in expected_embedding.iter_mut().zip(row) {
                *acc += p * x;
            }
        }
        let token = sample_index(&probs, gen_rng.next_unit()) as u32;
        let chosen_green = green[token as usize];
        steps.push(RolloutStep {
            prev,
            token,
            gamma,
            delta,
            green,
            noise,
            soft,
            probs,
            green_mass,
            expected_embedding,
            chosen_green,
        });
        prev = token;
    }
    Ok(RolloutTrace {
        prompt: prompt.tokens.clone(),
        gen_seed,
        noise_seed,
        tau,
        steps,
    })
}

/// Recomputes the differentiable quantities of a trace under (possibly
/// perturbed) generator parameters, holding the skeleton frozen: token path,
/// Gumbel noise and realized green lists stay exactly as recorded.
///
/// This is the function the finite-difference gradient oracle probes; its
/// analytic gradient is what the losses module computes.
pub fn replay(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    trace: &RolloutTrace,
) -> Result<RolloutTrace> {
    let v_total = model.vocab_size();
    let dim = model.embed_dim();
    let mut steps = Vec::with_capacity(trace.steps.len());
    for old in &trace.steps {
        if old.green.len() != v_total {
            return Err(Error::Usage("trace vocabulary does not match model".into()));
        }
        let e = model.embed(old.prev)?;
        let gamma = gamma_net.output(e)?;
        let delta = delta_net.output(e)?;
        let logits = model.logits(old.prev)?;
        let mut soft = vec![0.0; v_total];
        let mut biased = vec![0.0; v_total];
        for v in 0..v_total {
            let (g0, g1) = old.noise[v];
            soft[v] = soft_membership(gamma, trace.tau, g0, g1)?.value;
            biased[v] = logits[v] + soft[v] * delta;
        }
        let probs = softmax(&biased);
        let green_mass = probs
            .iter()
            .zip(&old.green)
            .filter(|(_, &g)| g)
            .map(|(p, _)| p)
            .sum();
        let mut expected_embedding = vec![0.0; dim];
        for (v, p) in probs.iter().enumerate() {
            let row = model.embeddings().row(v as u32);
            for (acc, x) in expected_embedding.iter_mut().zip(row) {
                *acc += p * x;
            }
        }
        steps.push(RolloutStep {
            prev: old.prev,
            token: old.token,
            gamma,
            delta,
            green: old.green.clone(),
            noise: old.noise.clone(),
            soft,
            probs,
            green_mass,
            expected_embedding,
            chosen_green: old.chosen_green,
        });
    }
    Ok(RolloutTrace {
        prompt: trace.prompt.clone(),
        gen_seed: trace.gen_seed,
        noise_seed: trace.noise_seed,
        tau: trace.tau,
        steps,
    })
}

//! Training objectives and their exact gradients.
//!
//! Detection loss: the negated relaxed z-score, where the green count is
//! replaced by the per-step green probability mass of the modified
//! distribution. Semantic loss: negated cosine similarity between sentence
//! embeddings of the unwatermarked reference continuation and the rollout's
//! probability-weighted embeddings.
//!
//! Gradients flow through the softmax, the relaxed memberships and the
//! watermark logit into both generator outputs per step; the trainer then
//! pushes those per-step upstreams through the networks. The skeleton of a
//! trace (token path, noise, realized green lists) is held constant, which
//! is exactly the function [`crate::pipeline::replay`] exposes for
//! finite-difference verification.

use crate::error::{Error, Result};
use crate::generators::{flatten_gradients_into, GeneratorNet, NetGradients};
use crate::lm::{Embeddings, Origin, SyntheticLM, TokenSeq};
use crate::partition::soft_membership_dgamma;
use crate::pipeline::{RolloutStep, RolloutTrace};
use crate::rng::SplitMix64;

/// Variance sums at or below this are treated as degenerate.
const VAR_FLOOR: f64 = 1e-9;

/// Both objective values for one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub detection: f64,
    pub semantic: f64,
}

/// Fixed random projection with mean pooling: a deterministic stand-in for
/// a learned sentence encoder. Pure function of its seed and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedder {
    input_dim: usize,
    output_dim: usize,
    /// `output_dim x input_dim`, row-major.
    projection: Vec<f64>,
}

pub const DEFAULT_SENTENCE_DIM: usize = 16;

impl SentenceEmbedder {
    pub fn new(seed: u64, input_dim: usize, output_dim: usize) -> Self {
        let mut rng = SplitMix64::new(seed);
        let scale = (input_dim as f64).sqrt().recip();
        let projection = (0..output_dim * input_dim)
            .map(|_| scale * rng.next_gaussian())
            .collect();
        Self { input_dim, output_dim, projection }
    }

    /// Embedder with an explicit projection matrix (row-major).
    pub fn from_projection(projection: Vec<f64>, input_dim: usize, output_dim: usize) -> Result<Self> {
        if projection.len() != input_dim * output_dim {
            return Err(Error::Config(format!(
                "projection has {} entries, expected {}",
                projection.len(),
                input_dim * output_dim
            )));
        }
        Ok(Self { input_dim, output_dim, projection })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn project(&self, mean: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.projection[j * self.input_dim..(j + 1) * self.input_dim];
            *o = row.iter().zip(mean).map(|(p, m)| p * m).sum();
        }
        out
    }

    /// Mean-pools the vectors, projects, and L2-normalizes.
    pub fn embed_sequence<'a, I>(&self, vectors: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut mean = vec![0.0; self.input_dim];
        let mut count = 0usize;
        for v in vectors {
            if v.len() != self.input_dim {
                return Err(Error::Input(format!(
                    "vector of length {} does not match embedder input_dim {}",
                    v.len(),
                    self.input_dim
                )));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("embed_sequence needs at least one vector".into()));
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let q = self.project(&mean);
        let norm = l2_norm(&q);
        if norm <= 1e-12 {
            return Err(Error::Numeric("projected sentence embedding has near-zero norm".into()));
        }
        Ok(q.iter().map(|x| x / norm).collect())
    }

    /// Sentence embedding of the token sequence's hard embeddings.
    pub fn embed_tokens(&self, seq: &TokenSeq, embeddings: &Embeddings) -> Result<Vec<f64>> {
        seq.validate_vocab(embeddings.len())?;
        self.embed_sequence(seq.tokens.iter().map(|&t| embeddings.row(t)))
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

/// Per-step upstream gradients into the generator outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepUpstreams {
    pub d_gamma: Vec<f64>,
    pub d_delta: Vec<f64>,
}

fn check_nonempty(trace: &RolloutTrace) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Input("trace has no steps".into()));
    }
    Ok(())
}

fn variance_sum(trace: &RolloutTrace) -> Result<f64> {
    let b: f64 = trace.steps.iter().map(|s| s.gamma * (1.0 - s.gamma)).sum();
    if b <= VAR_FLOOR {
        return Err(Error::Numeric(format!(
            "degenerate variance sum {b}: every splitting ratio sits at the clamp"
        )));
    }
    Ok(b)
}

/// Relaxed z-score of a trace.
pub fn relaxed_z(trace: &RolloutTrace) -> Result<f64> {
    check_nonempty(trace)?;
    let a: f64 = trace.steps.iter().map(|s| s.green_mass - s.gamma).sum();
    Ok(a / variance_sum(trace)?.sqrt())
}

/// Detection loss `-z_hat`.
pub fn detection_loss(trace: &RolloutTrace) -> Result<f64> {
    Ok(-relaxed_z(trace)?)
}

/// Gradient of a loss w.r.t. one step's gamma and delta, given the upstream
/// gradients w.r.t. that step's green mass and expected embedding.
///
/// Backpropagates through the softmax, the logit bias and the relaxed
/// memberships; the realized green list and the noise are constants.
fn step_backward(
    step: &RolloutStep,
    embeddings: &Embeddings,
    tau: f64,
    d_green_mass: f64,
    d_embedding: Option<&[f64]>,
) -> (f64, f64) {
    let v_total = step.probs.len();
    // dL/d p_v for every vocabulary token.
    let mut d_prob = vec![0.0; v_total];
    if d_green_mass != 0.0 {
        for (dp, &g) in d_prob.iter_mut().zip(&step.green) {
            if g {
                *dp += d_green_mass;
            }
        }
    }
    if let Some(w) = d_embedding {
        for (v, dp) in d_prob.iter_mut().enumerate() {
            let row = embeddings.row(v as u32);
            *dp += row.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    // Softmax backward: dL/d l_v = p_v (s_v - sum_u p_u s_u).
    let dot: f64 = step.probs.iter().zip(&d_prob).map(|(p, s)| p * s).sum();
    let mut d_gamma = 0.0;
    let mut d_delta = 0.0;
    for v in 0..v_total {
        let d_logit = step.probs[v] * (d_prob[v] - dot);
        let y = step.soft[v];
        d_delta += d_logit * y;
        // Through the relaxed membership into gamma, noise held fixed.
        d_gamma += d_logit * step.delta * soft_membership_dgamma(y, step.gamma, tau);
    }
    (d_gamma, d_delta)
}

/// Detection loss with per-step gradients into the generator outputs.
pub fn detection_loss_with_grads(
    trace: &RolloutTrace,
    embeddings: &Embeddings,
) -> Result<(f64, StepUpstreams)> {
    check_nonempty(trace)?;
    let t = trace.len();
    let a: f64 = trace.steps.iter().map(|s| s.green_mass - s.gamma).sum();
    let b = variance_sum(trace)?;
    let sqrt_b = b.sqrt();
    let loss = -a / sqrt_b;
    let mut up = StepUpstreams { d_gamma: vec![0.0; t], d_delta: vec![0.0; t] };
    for (i, step) in trace.steps.iter().enumerate() {
        // L_D = -A/sqrt(B): the direct terms through the sums.
        let direct = 1.0 / sqrt_b + a * (1.0 - 2.0 * step.gamma) / (2.0 * b * sqrt_b);
        let d_pgr = -1.0 / sqrt_b;
        let (dg, dd) = step_backward(step, embeddings, trace.tau, d_pgr, None);
        up.d_gamma[i] = direct + dg;
        up.d_delta[i] = dd;
    }
    Ok((loss, up))
}

fn check_reference(reference: &TokenSeq, trace: &RolloutTrace) -> Result<()> {
    if !matches!(reference.origin, Origin::Unwatermarked | Origin::Human) {
        return Err(Error::Usage(format!(
            "semantic reference must be an unwatermarked continuation, got {:?}",
            reference.origin
        )));
    }
    if reference.len() != trace.len() {
        return Err(Error::Usage(format!(
            "reference length {} does not match trace length {}",
            reference.len(),
            trace.len()
        )));
    }
    Ok(())
}

/// Semantic loss: negated cosine between the reference continuation's
/// sentence embedding and the rollout's (soft) sentence embedding.
pub fn semantic_loss(
    reference: &TokenSeq,
    trace: &RolloutTrace,
    embedder: &SentenceEmbedder,
    model: &SyntheticLM,
) -> Result<f64> {
    semantic_loss_impl(reference, trace, embedder, model, false).map(|(l, _)| l)
}

/// Semantic loss with per-step gradients into the generator outputs.
pub fn semantic_loss_with_grads(
    reference: &TokenSeq,
    trace: &RolloutTrace,
    embedder: &SentenceEmbedder,
    model: &SyntheticLM,
) -> Result<(f64, StepUpstreams)> {
    let (loss, up) = semantic_loss_impl(reference, trace, embedder, model, true)?;
    Ok((loss, up.expect("gradients requested")))
}

fn semantic_loss_impl(
    reference: &TokenSeq,
    trace: &RolloutTrace,
    embedder: &SentenceEmbedder,
    model: &SyntheticLM,
    with_grads: bool,
) -> Result<(f64, Option<StepUpstreams>)> {
    check_nonempty(trace)?;
    check_reference(reference, trace)?;
    let embeddings = model.embeddings();
    let r = embedder.embed_tokens(reference, embeddings)?;

    let t = trace.len();
    let dim = embedder.input_dim();
    let mut mean = vec![0.0; dim];
    for step in &trace.steps {
        if step.expected_embedding.len() != dim {
            return Err(Error::Input(format!(
                "trace embedding dim {} does not match embedder input_dim {dim}",
                step.expected_embedding.len()
            )));
        }
        for (m, x) in mean.iter_mut().zip(&step.expected_embedding) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let q = embedder.project(&mean);
    let norm = l2_norm(&q);
    if norm <= 1e-12 {
        return Err(Error::Numeric("projected rollout embedding has near-zero norm".into()));
    }
    let f_w: Vec<f64> = q.iter().map(|x| x / norm).collect();
    let cos: f64 = r.iter().zip(&f_w).map(|(a, b)| a * b).sum();
    let loss = -cos;
    if !with_grads {
        return Ok((loss, None));
    }

    // dL/dq = -(r - cos * f_w) / |q|, then back through the projection and
    // the mean pooling; identical for every step.
    let d_q: Vec<f64> = r
        .iter()
        .zip(&f_w)
        .map(|(ri, fi)| -(ri - cos * fi) / norm)
        .collect();
    let mut w = vec![0.0; dim];
    for (j, dq) in d_q.iter().enumerate() {
        let row = &embedder.projection[j * dim..(j + 1) * dim];
        for (wi, pj) in w.iter_mut().zip(row) {
            *wi += dq * pj;
        }
    }
    for wi in &mut w {
        *wi /= t as f64;
    }

    let mut up = StepUpstreams { d_gamma: vec![0.0; t], d_delta: vec![0.0; t] };
    for (i, step) in trace.steps.iter().enumerate() {
        let (dg, dd) = step_backward(step, embeddings, trace.tau, 0.0, Some(&w));
        up.d_gamma[i] = dg;
        up.d_delta[i] = dd;
    }
    Ok((loss, Some(up)))
}

/// Pushes per-step upstream gradients through both generator networks,
/// producing a flat gradient vector in checkpoint order (gamma net first).
pub fn param_gradients(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    trace: &RolloutTrace,
    upstreams: &StepUpstreams,
) -> Result<Vec<f64>> {
    if upstreams.d_gamma.len() != trace.len() || upstreams.d_delta.len() != trace.len() {
        return Err(Error::Input("upstream gradient lengths do not match trace".into()));
    }
    let mut acc_gamma = zero_gradients(gamma_net);
    let mut acc_delta = zero_gradients(delta_net);
    for (step, (dg, dd)) in trace
        .steps
        .iter()
        .zip(upstreams.d_gamma.iter().zip(&upstreams.d_delta))
    {
        let e = model.embed(step.prev)?;
        let (_, cache_g) = gamma_net.forward(e)?;
        add_gradients(&mut acc_gamma, &gamma_net.backward(&cache_g, *dg)?);
        let (_, cache_d) = delta_net.forward(e)?;
        add_gradients(&mut acc_delta, &delta_net.backward(&cache_d, *dd)?);
    }
    let mut flat = Vec::with_capacity(gamma_net.param_count() + delta_net.param_count());
    flatten_gradients_into(&acc_gamma, &mut flat);
    flatten_gradients_into(&acc_delta, &mut flat);
    Ok(flat)
}

fn zero_gradients(net: &GeneratorNet) -> NetGradients {
    NetGradients {
        w1: vec![0.0; net.hidden_dim * net.input_dim],
        b1: vec![0.0; net.hidden_dim],
        w2: vec![0.0; net.hidden_dim],
        b2: 0.0,
        input: vec![0.0; net.input_dim],
    }
}

fn add_gradients(acc: &mut NetGradients, g: &NetGradients) {
    for (a, b) in acc.w1.iter_mut().zip(&g.w1) {
        *a += b;
    }
    for (a, b) in acc.b1.iter_mut().zip(&g.b1) {
        *a += b;
    }
    for (a, b) in acc.w2.iter_mut().zip(&g.w2) {
        *a += b;
    }
    acc.b2 += g.b2;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{assign_pair, flatten_pair, GeneratorKind};
    use crate::lm::SyntheticLM;
    use crate::partition::PartitionKey;
    use crate::pipeline::{replay, soft_rollout};

    fn test_model() -> SyntheticLM {
        SyntheticLM::build(48, 8, 7, [0.25, 0.25, 0.5]).unwrap()
    }

    fn trained_like_nets(model: &SyntheticLM) -> (GeneratorNet, GeneratorNet) {
        (
            GeneratorNet::init_to_constant(GeneratorKind::Gamma, 0.25, 11, model.embed_dim(), 12).unwrap(),
            GeneratorNet::init_to_constant(GeneratorKind::Delta, 1.25, 12, model.embed_dim(), 12).unwrap(),
        )
    }

    fn make_trace(model: &SyntheticLM, length: usize) -> (RolloutTrace, GeneratorNet, GeneratorNet) {
        let (g, d) = trained_like_nets(model);
        let prompt = model.sample_prompt(4, 3).unwrap();
        let trace = soft_rollout(model, &g, &d, PartitionKey::new(5), &prompt, length, 0.1, 21, 22).unwrap();
        (trace, g, d)
    }

    fn synthetic_trace(gammas: &[f64], masses: &[f64]) -> RolloutTrace {
        let steps = gammas
            .iter()
            .zip(masses)
            .map(|(&gamma, &green_mass)| RolloutStep {
                prev: 0,
                token: 0,
                gamma,
                delta: 1.0,
                green: vec![],
                noise: vec![],
                soft: vec![],
                probs: vec![],
                green_mass,
                expected_embedding: vec![],
                chosen_green: false,
            })
            .collect();
        RolloutTrace { prompt: vec![0], gen_seed: 0, noise_seed: 0, tau: 0.1, steps }
    }

    #[test]
    fn embed_sequence_is_unit_norm() {
        let e = SentenceEmbedder::new(1, 8, 16);
        let v = [vec![0.5; 8], vec![-0.25; 8]];
        let out = e.embed_sequence(v.iter().map(|x| x.as_slice())).unwrap();
        assert!((l2_norm(&out) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embed_sequence_single_vector_is_normalized_projection() {
        let e = SentenceEmbedder::new(2, 4, 8);
        let v = [0.3, -0.7, 0.2, 0.9];
        let out = e.embed_sequence(std::iter::once(&v[..])).unwrap();
        let q = e.project(&v);
        let n = l2_norm(&q);
        for (a, b) in out.iter().zip(&q) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_sequence_is_permutation_invariant() {
        let e = SentenceEmbedder::new(3, 4, 8);
        let a = [1.0, 0.0, 0.5, -0.5];
        let b = [0.0, 2.0, -1.0, 0.25];
        let c = [0.7, 0.7, 0.7, 0.7];
        let one = e.embed_sequence([&a[..], &b[..], &c[..]]).unwrap();
        let two = e.embed_sequence([&c[..], &a[..], &b[..]]).unwrap();
        for (x, y) in one.iter().zip(&two) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_sequence_rejects_empty_input() {
        let e = SentenceEmbedder::new(1, 4, 8);
        assert!(e.embed_sequence(std::iter::empty::<&[f64]>()).is_err());
    }

    #[test]
    fn embedders_with_equal_seeds_are_identical() {
        assert_eq!(SentenceEmbedder::new(9, 8, 16), SentenceEmbedder::new(9, 8, 16));
    }

    #[test]
    fn detection_loss_zero_when_mass_equals_gamma() {
        let trace = synthetic_trace(&[0.25; 50], &[0.25; 50]);
        assert!(detection_loss(&trace).unwrap().abs() < 1e-12);
    }

    #[test]
    fn detection_loss_hand_computed_value() {
        let trace = synthetic_trace(&[0.25; 200], &[0.5; 200]);
        let loss = detection_loss(&trace).unwrap();
        assert!((loss + 8.16496580927726).abs() < 1e-10);
    }

    #[test]
    fn detection_loss_rejects_degenerate_variance() {
        let trace = synthetic_trace(&[1e-11], &[0.5]);
        assert!(matches!(detection_loss(&trace), Err(Error::Numeric(_))));
    }

    #[test]
    fn relaxed_z_with_flags_recovers_detector_z() {
        let model = test_model();
        let (mut trace, _, _) = make_trace(&model, 40);
        let flags: Vec<bool> = trace.steps.iter().map(|s| s.chosen_green).collect();
        let gammas: Vec<f64> = trace.steps.iter().map(|s| s.gamma).collect();
        for step in &mut trace.steps {
            step.green_mass = if step.chosen_green { 1.0 } else { 0.0 };
        }
        let z_hat = relaxed_z(&trace).unwrap();
        let z = crate::detector::z_score(&flags, &gammas).unwrap().z;
        assert!((z_hat - z).abs() < 1e-12);
    }

    #[test]
    fn relaxed_z_invariant_under_common_logit_shift() {
        let model = test_model();
        let (trace, _, _) = make_trace(&model, 20);
        let mut shifted = trace.clone();
        for step in &mut shifted.steps {
            // Rebuild the probabilities from shifted biased logits; softmax
            // removes the shift so the trace is unchanged.
            let logits: Vec<f64> = step.probs.iter().map(|p| p.ln() + 3.7).collect();
            let probs = crate::lm::softmax(&logits);
            let mass: f64 = probs.iter().zip(&step.green).filter(|(_, &g)| g).map(|(p, _)| p).sum();
            step.probs = probs;
            step.green_mass = mass;
        }
        let a = relaxed_z(&trace).unwrap();
        let b = relaxed_z(&shifted).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn raising_delta_raises_green_mass_and_relaxed_z() {
        let model = test_model();
        let (trace, _, _) = make_trace(&model, 30);
        let step = &trace.steps[7];
        assert!(step.green_mass > 0.0 && step.green_mass < 1.0);
        let logits = model.logits(step.prev).unwrap();
        let recompute = |delta: f64| -> f64 {
            let biased: Vec<f64> = logits
                .iter()
                .zip(&step.soft)
                .map(|(l, y)| l + y * delta)
                .collect();
            let probs = crate::lm::softmax(&biased);
            probs.iter().zip(&step.green).filter(|(_, &g)| g).map(|(p, _)| p).sum()
        };
        let lo = recompute(step.delta);
        let hi = recompute(step.delta + 0.5);
        assert!(hi > lo, "green mass did not increase: {lo} -> {hi}");
        let mut bumped = trace.clone();
        bumped.steps[7].green_mass = hi;
        assert!(relaxed_z(&bumped).unwrap() > relaxed_z(&trace).unwrap());
    }

    #[test]
    fn semantic_loss_is_minus_one_for_identical_embeddings() {
        let model = test_model();
        let (mut trace, _, _) = make_trace(&model, 10);
        let reference = model
            .sample_unwatermarked(&model.sample_prompt(4, 3).unwrap(), 10, trace.gen_seed)
            .unwrap();
        for (step, &tok) in trace.steps.iter_mut().zip(&reference.tokens) {
            step.expected_embedding = model.embed(tok).unwrap().to_vec();
        }
        let embedder = SentenceEmbedder::new(5, model.embed_dim(), 16);
        let loss = semantic_loss(&reference, &trace, &embedder, &model).unwrap();
        assert!((loss + 1.0).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn semantic_loss_is_zero_for_orthogonal_embeddings() {
        let model = test_model();
        let dim = model.embed_dim();
        let (mut trace, _, _) = make_trace(&model, 5);
        let reference = model
            .sample_unwatermarked(&model.sample_prompt(4, 3).unwrap(), 5, trace.gen_seed)
            .unwrap();
        // Identity projection; craft rollout embeddings orthogonal to the
        // reference mean.
        let mut identity = vec![0.0; dim * dim];
        for i in 0..dim {
            identity[i * dim + i] = 1.0;
        }
        let embedder = SentenceEmbedder::from_projection(identity, dim, dim).unwrap();
        let mut ref_mean = vec![0.0; dim];
        for &t in &reference.tokens {
            for (m, x) in ref_mean.iter_mut().zip(model.embed(t).unwrap()) {
                *m += x / reference.len() as f64;
            }
        }
        let mut ortho = vec![0.0; dim];
        ortho[0] = -ref_mean[1];
        ortho[1] = ref_mean[0];
        for step in &mut trace.steps {
            step.expected_embedding = ortho.clone();
        }
        let loss = semantic_loss(&reference, &trace, &embedder, &model).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn semantic_loss_rejects_mismatched_provenance() {
        let model = test_model();
        let (trace, _, _) = make_trace(&model, 10);
        let embedder = SentenceEmbedder::new(5, model.embed_dim(), 16);
        let wrong_origin = TokenSeq::new(vec![1; 10], Origin::Watermarked).unwrap();
        assert!(matches!(
            semantic_loss(&wrong_origin, &trace, &embedder, &model),
            Err(Error::Usage(_))
        ));
        let wrong_len = TokenSeq::new(vec![1; 9], Origin::Unwatermarked).unwrap();
        assert!(matches!(
            semantic_loss(&wrong_len, &trace, &embedder, &model),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn semantic_loss_stays_in_unit_interval() {
        let model = test_model();
        let (trace, _, _) = make_trace(&model, 30);
        let prompt = model.sample_prompt(4, 3).unwrap();
        let reference = model.sample_unwatermarked(&prompt, 30, trace.gen_seed).unwrap();
        let embedder = SentenceEmbedder::new(5, model.embed_dim(), 16);
        let loss = semantic_loss(&reference, &trace, &embedder, &model).unwrap();
        assert!((-1.0..=1.0).contains(&loss));
    }

    // Finite-difference verification of both loss gradients through replay:
    // the frozen trace defines the differentiable function of the
    // parameters.
    fn fd_check(loss_kind: &str) {
        let model = test_model();
        let (g, d) = trained_like_nets(&model);
        let prompt = model.sample_prompt(4, 13).unwrap();
        let trace = soft_rollout(&model, &g, &d, PartitionKey::new(5), &prompt, 8, 0.1, 31, 32).unwrap();
        let reference = model.sample_unwatermarked(&prompt, 8, trace.gen_seed).unwrap();
        let embedder = SentenceEmbedder::new(5, model.embed_dim(), 16);

        let (_, ups) = match loss_kind {
            "detection" => detection_loss_with_grads(&trace, model.embeddings()).unwrap(),
            _ => semantic_loss_with_grads(&reference, &trace, &embedder, &model).unwrap(),
        };
        let analytic = param_gradients(&model, &g, &d, &trace, &ups).unwrap();

        let params = flatten_pair(&g, &d);
        let mut g2 = g.clone();
        let mut d2 = d.clone();
        let eps = 1e-5;
        let eval = |g2: &GeneratorNet, d2: &GeneratorNet| -> f64 {
            let r = replay(&model, g2, d2, &trace).unwrap();
            match loss_kind {
                "detection" => detection_loss(&r).unwrap(),
                _ => semantic_loss(&reference, &r, &embedder, &model).unwrap(),
            }
        };
        // Probe a spread of parameters rather than all of them: w1, b1, w2
        // and both biases of both nets.
        let n = params.len();
        let probes: Vec<usize> = (0..n).step_by(23).chain([n / 2, n - 1]).collect();
        for p in probes {
            let mut plus = params.clone();
            plus[p] += eps;
            assign_pair(&mut g2, &mut d2, &plus).unwrap();
            let f_plus = eval(&g2, &d2);
            let mut minus = params.clone();
            minus[p] -= eps;
            assign_pair(&mut g2, &mut d2, &minus).unwrap();
            let f_minus = eval(&g2, &d2);
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let scale = fd.abs().max(analytic[p].abs()).max(1e-7);
            assert!(
                (fd - analytic[p]).abs() / scale < 1e-4,
                "{loss_kind} param {p}: fd {fd} vs analytic {}",
                analytic[p]
            );
        }
    }

    #[test]
    fn detection_gradient_matches_finite_differences() {
        fd_check("detection");
    }

    #[test]
    fn semantic_gradient_matches_finite_differences() {
        fd_check("semantic");
    }
}

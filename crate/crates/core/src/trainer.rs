//! Multi-objective training of the generator pair.
//!
//! Each step rolls out a batch of soft traces, evaluates the detection and
//! semantic losses with full-parameter gradients, and either combines the
//! two gradients at the minimum-norm point of their convex hull (the
//! multiple-gradient descent rule) or collapses them with a fixed trade-off
//! weight (the weighted-sum ablation). Updates are plain bias-corrected
//! Adam. Checkpoints are taken on a fixed cadence and scored on a held-out
//! validation split; the selected checkpoint maximizes the mean of min-max
//! normalized validation z and cosine similarity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::detect;
use crate::error::{Error, Result};
use crate::generators::{assign_pair, flatten_pair, Checkpoint, GeneratorNet};
use crate::lm::{SyntheticLM, TokenSeq};
use crate::losses::{
    detection_loss_with_grads, param_gradients, semantic_loss_with_grads, SentenceEmbedder,
};
use crate::partition::PartitionKey;
use crate::pipeline::{generate_watermarked, soft_rollout};
use crate::rng::{mix64, SplitMix64};

/// Gradient combination rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    Mgda,
    WeightedSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub gen_len: usize,
    pub checkpoint_every: usize,
    pub mode: TrainMode,
    /// Trade-off weight for [`TrainMode::WeightedSum`]; ignored under MGDA.
    pub lambda_ws: f64,
    /// Held-out prompts used to score checkpoints.
    pub n_validation: usize,
    pub data_seed: u64,
    pub noise_seed: u64,
    pub sentence_dim: usize,
    pub embedder_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 2,
            lr: 1e-4,
            tau: 0.1,
            gen_len: 200,
            checkpoint_every: 100,
            mode: TrainMode::Mgda,
            lambda_ws: 4e-4,
            n_validation: 100,
            data_seed: 1,
            noise_seed: 2,
            sentence_dim: crate::losses::DEFAULT_SENTENCE_DIM,
            embedder_seed: 3,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.gen_len < 1 {
            return Err(Error::Config("gen_len must be >= 1".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if self.lambda_ws < 0.0 {
            return Err(Error::Config("lambda_ws must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Minimum-norm coefficient for the convex combination of two gradients.
///
/// Returns `None` when both gradients vanish (a convergence signal rather
/// than an error). Branch order matters and is part of the contract: the
/// first matching case wins.
pub fn mgda_lambda(g_d: &[f64], g_s: &[f64]) -> Result<Option<f64>> {
    if g_d.len() != g_s.len() {
        return Err(Error::Input(format!(
            "gradient lengths differ: {} vs {}",
            g_d.len(),
            g_s.len()
        )));
    }
    let dot_ds: f64 = g_d.iter().zip(g_s).map(|(a, b)| a * b).sum();
    let dot_dd: f64 = g_d.iter().map(|a| a * a).sum();
    let dot_ss: f64 = g_s.iter().map(|a| a * a).sum();
    if dot_dd == 0.0 && dot_ss == 0.0 {
        return Ok(None);
    }
    let lambda = if dot_ds >= dot_dd {
        1.0
    } else if dot_ds >= dot_ss {
        0.0
    } else {
        // Interior minimum of |lambda g_D + (1-lambda) g_S|^2.
        (dot_ss - dot_ds) / (dot_dd - 2.0 * dot_ds + dot_ss)
    };
    Ok(Some(lambda))
}

/// `lambda * g_D + (1 - lambda) * g_S`.
pub fn combine_gradients(g_d: &[f64], g_s: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda must lie in [0,1], got {lambda}")));
    }
    if g_d.len() != g_s.len() {
        return Err(Error::Input("gradient lengths differ".into()));
    }
    Ok(g_d
        .iter()
        .zip(g_s)
        .map(|(d, s)| lambda * d + (1.0 - lambda) * s)
        .collect())
}

/// Gradient of `L = L_S + lambda_ws * L_D`, unnormalized.
pub fn weighted_sum_grad(g_d: &[f64], g_s: &[f64], lambda_ws: f64) -> Result<Vec<f64>> {
    if lambda_ws < 0.0 {
        return Err(Error::Input(format!("lambda_ws must be nonnegative, got {lambda_ws}")));
    }
    if g_d.len() != g_s.len() {
        return Err(Error::Input("gradient lengths differ".into()));
    }
    Ok(g_s.iter().zip(g_d).map(|(s, d)| s + lambda_ws * d).collect())
}

/// Bias-corrected Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::Input("parameter/gradient/state lengths differ".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training("non-finite gradient in Adam update".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_d: f64,
    pub loss_s: f64,
    /// MGDA coefficient, the fixed weighted-sum weight, or null once both
    /// gradients vanish.
    pub lambda: Option<f64>,
    pub grad_norm_d: f64,
    pub grad_norm_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_cos: Option<f64>,
}

/// Validation metrics of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub mean_z: f64,
    pub mean_cosine: f64,
}

/// A saved checkpoint with its validation score.
#[derive(Debug, Clone)]
pub struct ScoredCheckpoint {
    pub checkpoint: Checkpoint,
    pub validation: ValidationPoint,
}

/// Everything `train` produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<ScoredCheckpoint>,
    /// Index into `checkpoints` of the selected one.
    pub selected: usize,
    pub log: Vec<StepLog>,
    /// Validation point of the untrained initialization.
    pub init_validation: ValidationPoint,
}

impl TrainOutcome {
    pub fn selected_checkpoint(&self) -> &ScoredCheckpoint {
        &self.checkpoints[self.selected]
    }
}

fn derive_seed(base: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix64(base ^ mix64(tag) ^ mix64(a.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(b)))
}

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_ROLLOUT: u64 = 0x524F_4C4C;
const TAG_NOISE: u64 = 0x4E4F_4953;
const TAG_VAL: u64 = 0x56414C;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scores the current nets on the validation prompts: mean detection z of
/// hard watermarked generations and mean cosine to the seed-matched
/// unwatermarked references.
#[allow(clippy::too_many_arguments)]
pub fn validate(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    key: PartitionKey,
    prompts: &[TokenSeq],
    gen_len: usize,
    embedder: &SentenceEmbedder,
    data_seed: u64,
) -> Result<ValidationPoint> {
    if prompts.is_empty() {
        return Err(Error::Config("validation prompt pool is empty".into()));
    }
    let results: Vec<Result<(f64, f64)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let seed = derive_seed(data_seed, TAG_VAL, i as u64, 0);
            let reference = model.sample_unwatermarked(prompt, gen_len, seed)?;
            let wm = generate_watermarked(model, gamma_net, delta_net, key, prompt, gen_len, seed)?;
            let z = detect(&wm.seq, gamma_net, model.embeddings(), key, 0.0)?.z;
            let a = embedder.embed_tokens(&wm.seq, model.embeddings())?;
            let b = embedder.embed_tokens(&reference, model.embeddings())?;
            let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            Ok((z, cos))
        })
        .collect();
    let mut sum_z = 0.0;
    let mut sum_cos = 0.0;
    for r in results {
        let (z, cos) = r?;
        sum_z += z;
        sum_cos += cos;
    }
    let n = prompts.len() as f64;
    Ok(ValidationPoint { mean_z: sum_z / n, mean_cosine: sum_cos / n })
}

struct BatchResult {
    loss_d: f64,
    loss_s: f64,
    grad_d: Vec<f64>,
    grad_s: Vec<f64>,
}

/// Per-member losses and flat gradients: (L_D, L_S, g_D, g_S).
type MemberResult = (f64, f64, Vec<f64>, Vec<f64>);

#[allow(clippy::too_many_arguments)]
fn batch_losses_and_grads(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    key: PartitionKey,
    prompts: &[&TokenSeq],
    cfg: &TrainConfig,
    embedder: &SentenceEmbedder,
    global_step: usize,
) -> Result<BatchResult> {
    let members: Vec<Result<MemberResult>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let gen_seed = derive_seed(cfg.data_seed, TAG_ROLLOUT, global_step as u64, i as u64);
            let noise_seed = derive_seed(cfg.noise_seed, TAG_NOISE, global_step as u64, i as u64);
            let reference = model.sample_unwatermarked(prompt, cfg.gen_len, gen_seed)?;
            let trace = soft_rollout(
                model, gamma_net, delta_net, key, prompt, cfg.gen_len, cfg.tau, gen_seed, noise_seed,
            )?;
            let (loss_d, ups_d) = detection_loss_with_grads(&trace, model.embeddings())?;
            let g_d = param_gradients(model, gamma_net, delta_net, &trace, &ups_d)?;
            let (loss_s, ups_s) = semantic_loss_with_grads(&reference, &trace, embedder, model)?;
            let g_s = param_gradients(model, gamma_net, delta_net, &trace, &ups_s)?;
            Ok((loss_d, loss_s, g_d, g_s))
        })
        .collect();

    let n = prompts.len() as f64;
    let dim = gamma_net.param_count() + delta_net.param_count();
    let mut out = BatchResult {
        loss_d: 0.0,
        loss_s: 0.0,
        grad_d: vec![0.0; dim],
        grad_s: vec![0.0; dim],
    };
    for m in members {
        let (ld, ls, gd, gs) = m?;
        out.loss_d += ld / n;
        out.loss_s += ls / n;
        for (acc, g) in out.grad_d.iter_mut().zip(&gd) {
            *acc += g / n;
        }
        for (acc, g) in out.grad_s.iter_mut().zip(&gs) {
            *acc += g / n;
        }
    }
    if !out.loss_d.is_finite() || !out.loss_s.is_finite() {
        return Err(Error::Training(format!(
            "divergence at step {global_step}: L_D={}, L_S={}",
            out.loss_d, out.loss_s
        )));
    }
    Ok(out)
}

/// Runs the full training loop.
///
/// The prompt pool is shuffled by the data seed and split into train and
/// validation; rollout and noise seeds derive from (step, batch member), so
/// identical configs reproduce identical parameters bit for bit.
pub fn train(
    cfg: &TrainConfig,
    model: &SyntheticLM,
    key: PartitionKey,
    prompts: &[TokenSeq],
    gamma_init: GeneratorNet,
    delta_init: GeneratorNet,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prompts.len() <= cfg.n_validation {
        return Err(Error::Config(format!(
            "prompt pool of {} cannot supply {} validation prompts plus training data",
            prompts.len(),
            cfg.n_validation
        )));
    }
    let embedder = SentenceEmbedder::new(cfg.embedder_seed, model.embed_dim(), cfg.sentence_dim);

    let mut order: Vec<usize> = (0..prompts.len()).collect();
    SplitMix64::child(cfg.data_seed, TAG_SHUFFLE).shuffle(&mut order);
    let (train_idx, val_idx) = order.split_at(prompts.len() - cfg.n_validation);
    let val_prompts: Vec<TokenSeq> = val_idx.iter().map(|&i| prompts[i].clone()).collect();
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split of {} is smaller than batch size {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }

    let mut gamma_net = gamma_init;
    let mut delta_net = delta_init;
    let mut params = flatten_pair(&gamma_net, &delta_net);
    let mut adam = AdamState::new(params.len());

    let init_validation = validate(
        model, &gamma_net, &delta_net, key, &val_prompts, cfg.gen_len, &embedder, cfg.data_seed,
    )?;

    let batches_per_epoch = train_idx.len() / cfg.batch_size;
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total_steps);
    let mut checkpoints: Vec<ScoredCheckpoint> = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut epoch_order: Vec<usize> = train_idx.to_vec();
        SplitMix64::child(cfg.data_seed, TAG_SHUFFLE ^ (epoch as u64 + 1)).shuffle(&mut epoch_order);
        for batch in epoch_order.chunks_exact(cfg.batch_size) {
            global_step += 1;
            let batch_prompts: Vec<&TokenSeq> = batch.iter().map(|&i| &prompts[i]).collect();
            let result = batch_losses_and_grads(
                model, &gamma_net, &delta_net, key, &batch_prompts, cfg, &embedder, global_step,
            )?;

            let (lambda, grad) = match cfg.mode {
                TrainMode::Mgda => match mgda_lambda(&result.grad_d, &result.grad_s)? {
                    Some(l) => (Some(l), combine_gradients(&result.grad_d, &result.grad_s, l)?),
                    None => (None, vec![0.0; params.len()]),
                },
                TrainMode::WeightedSum => (
                    Some(cfg.lambda_ws),
                    weighted_sum_grad(&result.grad_d, &result.grad_s, cfg.lambda_ws)?,
                ),
            };
            if lambda.is_some() {
                adam_step(&mut params, &grad, &mut adam, cfg.lr)?;
                assign_pair(&mut gamma_net, &mut delta_net, &params)?;
            }

            let mut entry = StepLog {
                step: global_step,
                loss_d: result.loss_d,
                loss_s: result.loss_s,
                lambda,
                grad_norm_d: l2(&result.grad_d),
                grad_norm_s: l2(&result.grad_s),
                val_z: None,
                val_cos: None,
            };

            let is_last = global_step == total_steps;
            if global_step.is_multiple_of(cfg.checkpoint_every) || is_last {
                let validation = validate(
                    model, &gamma_net, &delta_net, key, &val_prompts, cfg.gen_len, &embedder,
                    cfg.data_seed,
                )?;
                entry.val_z = Some(validation.mean_z);
                entry.val_cos = Some(validation.mean_cosine);
                checkpoints.push(ScoredCheckpoint {
                    checkpoint: Checkpoint::new(global_step, gamma_net.clone(), delta_net.clone()),
                    validation,
                });
            }
            log.push(entry);
        }
    }

    if checkpoints.is_empty() {
        return Err(Error::Training("no checkpoints were produced".into()));
    }
    let selected = select_checkpoint(&checkpoints);
    Ok(TrainOutcome { checkpoints, selected, log, init_validation })
}

/// Index of the checkpoint maximizing the mean of min-max normalized
/// validation z and cosine; ties go to the earliest checkpoint.
pub fn select_checkpoint(checkpoints: &[ScoredCheckpoint]) -> usize {
    let zs: Vec<f64> = checkpoints.iter().map(|c| c.validation.mean_z).collect();
    let cs: Vec<f64> = checkpoints.iter().map(|c| c.validation.mean_cosine).collect();
    let norm = |xs: &[f64]| -> Vec<f64> {
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if (max - min).abs() < 1e-12 {
            return vec![0.5; xs.len()];
        }
        xs.iter().map(|x| (x - min) / (max - min)).collect()
    };
    let nz = norm(&zs);
    let nc = norm(&cs);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..checkpoints.len() {
        let score = 0.5 * (nz[i] + nc[i]);
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::GeneratorKind;
    use crate::rng::SplitMix64;

    #[test]
    fn mgda_orthogonal_gradients_balance() {
        let l = mgda_lambda(&[1.0, 0.0], &[0.0, 1.0]).unwrap().unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        let g = combine_gradients(&[1.0, 0.0], &[0.0, 1.0], l).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mgda_equal_gradients_pick_first_branch() {
        let l = mgda_lambda(&[0.3, -0.4], &[0.3, -0.4]).unwrap().unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn mgda_collinear_picks_shorter_vector() {
        let g_d = [1.0, 0.0];
        let g_s = [2.0, 0.0];
        let l = mgda_lambda(&g_d, &g_s).unwrap().unwrap();
        assert_eq!(l, 1.0);
        let g = combine_gradients(&g_d, &g_s, l).unwrap();
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn mgda_zero_pair_signals_convergence() {
        assert!(mgda_lambda(&[0.0; 4], &[0.0; 4]).unwrap().is_none());
    }

    #[test]
    fn mgda_lambda_is_grid_optimal() {
        let mut rng = SplitMix64::new(17);
        for trial in 0..100 {
            let dim = 2 + rng.next_below(64);
            let g_d: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
            let g_s: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
            let l = mgda_lambda(&g_d, &g_s).unwrap().unwrap();
            assert!((0.0..=1.0).contains(&l));
            let norm_at = |lam: f64| l2(&combine_gradients(&g_d, &g_s, lam).unwrap());
            let ours = norm_at(l);
            let mut grid_best = f64::INFINITY;
            let mut k = 0;
            while k <= 10_000 {
                grid_best = grid_best.min(norm_at(k as f64 * 1e-4));
                k += 1;
            }
            assert!(ours <= grid_best + 1e-9, "trial {trial}: {ours} > {grid_best}");

            // Min-norm point property: the combined gradient is a descent
            // direction for both objectives whenever it is interior.
            let g = combine_gradients(&g_d, &g_s, l).unwrap();
            let norm2 = g.iter().map(|x| x * x).sum::<f64>();
            let dot_d: f64 = g.iter().zip(&g_d).map(|(a, b)| a * b).sum();
            let dot_s: f64 = g.iter().zip(&g_s).map(|(a, b)| a * b).sum();
            assert!(dot_d >= norm2 - 1e-9);
            assert!(dot_s >= norm2 - 1e-9);
        }
    }

    #[test]
    fn combine_rejects_out_of_range_lambda() {
        assert!(combine_gradients(&[1.0], &[1.0], 1.5).is_err());
        assert!(combine_gradients(&[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn weighted_sum_edge_cases() {
        let g_d = [1.0, 2.0];
        let g_s = [0.5, -0.5];
        assert_eq!(weighted_sum_grad(&g_d, &g_s, 0.0).unwrap(), g_s.to_vec());
        let g = weighted_sum_grad(&g_d, &g_s, 4e-4).unwrap();
        assert!((g[0] - (0.5 + 4e-4)).abs() < 1e-15);
        assert!((g[1] - (-0.5 + 8e-4)).abs() < 1e-15);
    }

    #[test]
    fn moo_to_ws_weight_mapping() {
        // lambda_ws = lambda_moo / (1 - lambda_moo).
        let lambda_moo: f64 = 0.5;
        assert!((lambda_moo / (1.0 - lambda_moo) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0; 3], &mut state, 0.1).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With bias correction, the first update is lr * g/(|g| + eps').
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[0.5, -2.0], &mut state, 0.01).unwrap();
        assert!((params[0] + 0.01).abs() < 1e-6, "{}", params[0]);
        assert!((params[1] - 0.01).abs() < 1e-6, "{}", params[1]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut params, &[f64::NAN], &mut state, 0.01),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = vec![0.3, -0.7];
            let mut state = AdamState::new(2);
            for i in 0..50 {
                let g = [0.1 * (i as f64).sin(), -0.2];
                adam_step(&mut params, &g, &mut state, 0.01).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn select_checkpoint_normalized_mean_with_earliest_tie() {
        let mk = |step: usize, z: f64, c: f64| ScoredCheckpoint {
            checkpoint: Checkpoint::new(
                step,
                GeneratorNet::constant(GeneratorKind::Gamma, 0.25, 4, 4).unwrap(),
                GeneratorNet::constant(GeneratorKind::Delta, 1.0, 4, 4).unwrap(),
            ),
            validation: ValidationPoint { mean_z: z, mean_cosine: c },
        };
        // Second dominates both coordinates.
        let cks = vec![mk(100, 1.0, 0.5), mk(200, 2.0, 0.9)];
        assert_eq!(select_checkpoint(&cks), 1);
        // Symmetric trade-off scores tie: earliest wins.
        let cks = vec![mk(100, 2.0, 0.5), mk(200, 1.0, 0.9)];
        assert_eq!(select_checkpoint(&cks), 0);
        // All equal: earliest.
        let cks = vec![mk(100, 1.0, 0.5), mk(200, 1.0, 0.5)];
        assert_eq!(select_checkpoint(&cks), 0);
    }

    fn tiny_setup() -> (SyntheticLM, PartitionKey, Vec<TokenSeq>, GeneratorNet, GeneratorNet) {
        let model = SyntheticLM::build(48, 8, 7, [0.25, 0.25, 0.5]).unwrap();
        let prompts: Vec<TokenSeq> = (0..14)
            .map(|i| model.sample_prompt(4, 900 + i).unwrap())
            .collect();
        let g = GeneratorNet::init_to_constant(GeneratorKind::Gamma, 0.25, 1, 8, 8).unwrap();
        let d = GeneratorNet::init_to_constant(GeneratorKind::Delta, 1.25, 2, 8, 8).unwrap();
        (model, PartitionKey::new(99), prompts, g, d)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 1,
            gen_len: 12,
            checkpoint_every: 3,
            n_validation: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn train_runs_and_logs_mgda() {
        let (model, key, prompts, g, d) = tiny_setup();
        let out = train(&tiny_config(), &model, key, &prompts, g, d).unwrap();
        assert_eq!(out.log.len(), 5);
        assert!(!out.checkpoints.is_empty());
        for entry in &out.log {
            if let Some(l) = entry.lambda {
                assert!((0.0..=1.0).contains(&l), "lambda {l}");
            }
            assert!(entry.loss_d.is_finite() && entry.loss_s.is_finite());
        }
        // Final step always produces a scored checkpoint.
        assert_eq!(out.checkpoints.last().unwrap().checkpoint.step, 5);
    }

    #[test]
    fn train_is_deterministic() {
        let (model, key, prompts, g, d) = tiny_setup();
        let a = train(&tiny_config(), &model, key, &prompts, g.clone(), d.clone()).unwrap();
        let b = train(&tiny_config(), &model, key, &prompts, g, d).unwrap();
        let pa = flatten_pair(
            &a.selected_checkpoint().checkpoint.gamma,
            &a.selected_checkpoint().checkpoint.delta,
        );
        let pb = flatten_pair(
            &b.selected_checkpoint().checkpoint.gamma,
            &b.selected_checkpoint().checkpoint.delta,
        );
        assert_eq!(pa, pb);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn train_weighted_sum_mode_runs() {
        let (model, key, prompts, g, d) = tiny_setup();
        let cfg = TrainConfig { mode: TrainMode::WeightedSum, lambda_ws: 4e-4, ..tiny_config() };
        let out = train(&cfg, &model, key, &prompts, g, d).unwrap();
        assert!(out.log.iter().all(|e| e.lambda == Some(4e-4)));
    }

    #[test]
    fn train_rejects_undersized_prompt_pool() {
        let (model, key, prompts, g, d) = tiny_setup();
        let cfg = TrainConfig { n_validation: 14, ..tiny_config() };
        assert!(matches!(train(&cfg, &model, key, &prompts, g, d), Err(Error::Config(_))));
    }
}

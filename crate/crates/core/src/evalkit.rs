//! Evaluation protocol: FPR-calibrated thresholds, TPR, semantic
//! similarity, learned-parameter statistics by context category, Pareto
//! filtering and the full generate/detect/report loop.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::curvefit::{evaluate as curve_value, CurveFit};
use crate::detector::detect;
use crate::error::{Error, Result};
use crate::generators::GeneratorNet;
use crate::lm::{Embeddings, EntropyClass, ModelSpec, SyntheticLM, TokenSeq};
use crate::losses::SentenceEmbedder;
use crate::partition::PartitionKey;
use crate::pipeline::generate_watermarked;
use crate::rng::mix64;

/// Threshold from null z-scores at a target false-positive rate.
///
/// `fpr = 0` returns just above the null maximum; otherwise the nearest-rank
/// `(1 - fpr)` quantile. Verdicts use strict `z > threshold`, so values tied
/// with the threshold never count as positives.
pub fn calibrate_threshold(null_z: &[f64], fpr: f64) -> Result<f64> {
    if null_z.is_empty() {
        return Err(Error::Input("threshold calibration needs null z-scores".into()));
    }
    if !(0.0..1.0).contains(&fpr) {
        return Err(Error::Input(format!("fpr must lie in [0,1), got {fpr}")));
    }
    if fpr == 0.0 {
        let max = null_z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Ok(max + 1e-9);
    }
    let mut sorted = null_z.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((1.0 - fpr) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Fraction of z-scores strictly above the threshold.
pub fn tpr(wm_z: &[f64], threshold: f64) -> Result<f64> {
    if wm_z.is_empty() {
        return Err(Error::Input("TPR needs at least one z-score".into()));
    }
    Ok(wm_z.iter().filter(|&&z| z > threshold).count() as f64 / wm_z.len() as f64)
}

/// Cosine similarity of the two sequences' sentence embeddings.
pub fn similarity(
    a: &TokenSeq,
    b: &TokenSeq,
    embedder: &SentenceEmbedder,
    embeddings: &Embeddings,
) -> Result<f64> {
    let ea = embedder.embed_tokens(a, embeddings)?;
    let eb = embedder.embed_tokens(b, embeddings)?;
    Ok(ea.iter().zip(&eb).map(|(x, y)| x * y).sum())
}

/// Mean/spread of generator outputs grouped by the preceding token's
/// category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat<C> {
    pub category: C,
    pub count: usize,
    pub mean_gamma: f64,
    pub std_gamma: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
}

/// Groups the generator emissions of every scored position by the category
/// of its preceding token. `categories` must cover every token id.
pub fn bucket_stats<C: Ord + Clone>(
    texts: &[TokenSeq],
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    embeddings: &Embeddings,
    categories: &[C],
) -> Result<Vec<BucketStat<C>>> {
    let mut samples: BTreeMap<C, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for text in texts {
        if let Some(&bad) = text.tokens.iter().find(|&&t| t as usize >= categories.len()) {
            return Err(Error::Input(format!(
                "token id {bad} not covered by the category map of {}",
                categories.len()
            )));
        }
        for w in text.tokens.windows(2) {
            let prev = w[0];
            let e = embeddings.try_row(prev)?;
            let entry = samples.entry(categories[prev as usize].clone()).or_default();
            entry.0.push(gamma_net.output(e)?);
            entry.1.push(delta_net.output(e)?);
        }
    }
    Ok(samples
        .into_iter()
        .map(|(category, (gammas, deltas))| {
            let (mean_gamma, std_gamma) = mean_std(&gammas);
            let (mean_delta, std_delta) = mean_std(&deltas);
            BucketStat {
                category,
                count: gammas.len(),
                mean_gamma,
                std_gamma,
                mean_delta,
                std_delta,
            }
        })
        .collect())
}

/// One evaluated configuration on the detectability/semantics plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub config_id: String,
    pub mean_z: f64,
    /// True-positive rate at the calibrated threshold.
    pub tpr: f64,
    pub mean_cosine: f64,
}

impl TradeoffPoint {
    /// Domination in the (TPR, similarity) maximization order.
    pub fn dominates(&self, other: &TradeoffPoint) -> bool {
        self.tpr >= other.tpr
            && self.mean_cosine >= other.mean_cosine
            && (self.tpr > other.tpr || self.mean_cosine > other.mean_cosine)
    }
}

/// Non-dominated subset in input order.
pub fn pareto_filter(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| q.dominates(p)))
        .cloned()
        .collect()
}

/// One-sided Welch test p-value for the hypothesis `mean_a < mean_b`.
///
/// Inputs are per-group sample mean, sample variance (n-1 denominator) and
/// size. Small p supports the hypothesis.
pub fn welch_one_sided_p(
    mean_a: f64,
    var_a: f64,
    n_a: usize,
    mean_b: f64,
    var_b: f64,
    n_b: usize,
) -> Result<f64> {
    if n_a < 2 || n_b < 2 {
        return Err(Error::Input("Welch test needs at least 2 samples per group".into()));
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let sa = var_a / na;
    let sb = var_b / nb;
    let se = (sa + sb).sqrt();
    if se <= 0.0 {
        return Err(Error::Numeric("Welch test with zero pooled variance".into()));
    }
    let t = (mean_a - mean_b) / se;
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Numeric(format!("Student-t with dof {dof}: {e}")))?;
    Ok(dist.cdf(t))
}

/// Samples a fitted curve on an even grid, for CSV/plot export.
pub fn curve_samples(fit: &CurveFit, lo: f64, hi: f64, count: usize) -> Vec<(f64, f64)> {
    let step = if count > 1 { (hi - lo) / (count - 1) as f64 } else { 0.0 };
    (0..count)
        .map(|i| {
            let x = lo + step * i as f64;
            (x, curve_value(fit.family, &fit.params, x))
        })
        .collect()
}

/// Protocol knobs for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub config_id: String,
    pub n_test: usize,
    pub gen_len: usize,
    pub prompt_len: usize,
    pub eval_seed: u64,
    pub sentence_dim: usize,
    pub embedder_seed: u64,
    /// Oracle model for perplexity; defaults to the generation model.
    pub oracle: Option<ModelSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            config_id: "default".into(),
            n_test: 500,
            gen_len: 200,
            prompt_len: 20,
            eval_seed: 11,
            sentence_dim: crate::losses::DEFAULT_SENTENCE_DIM,
            embedder_seed: 3,
            oracle: None,
        }
    }
}

/// Full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_id: String,
    pub n_test: usize,
    pub gen_len: usize,
    pub threshold_fpr0: f64,
    pub threshold_fpr1: f64,
    pub tpr_at_fpr0: f64,
    pub tpr_at_fpr1: f64,
    pub mean_z_watermarked: f64,
    pub mean_z_null: f64,
    pub var_z_null: f64,
    pub mean_similarity: f64,
    pub std_similarity: f64,
    pub mean_ppl_watermarked: f64,
    pub mean_ppl_unwatermarked: f64,
    pub buckets: Vec<BucketStat<EntropyClass>>,
    pub tradeoff: TradeoffPoint,
}

/// Runs the full protocol: per prompt, a human-surrogate completion (the
/// null), a seed-matched unwatermarked reference and a watermarked
/// generation; thresholds calibrated on the null at FPR 0% and 1%.
pub fn evaluate(
    model: &SyntheticLM,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    key: PartitionKey,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.n_test < 2 {
        return Err(Error::Config("evaluation needs at least 2 test prompts".into()));
    }
    let embedder = SentenceEmbedder::new(cfg.embedder_seed, model.embed_dim(), cfg.sentence_dim);
    let oracle = match &cfg.oracle {
        Some(spec) => Some(spec.build()?),
        None => None,
    };
    let oracle_ref = oracle.as_ref().unwrap_or(model);

    struct Row {
        null_z: f64,
        wm_z: f64,
        sim: f64,
        ppl_wm: f64,
        ppl_ref: f64,
        wm: TokenSeq,
    }
    let rows: Vec<Result<Row>> = (0..cfg.n_test)
        .into_par_iter()
        .map(|i| {
            let prompt_seed = mix64(cfg.eval_seed ^ mix64(0x50524D ^ i as u64));
            let human_seed = mix64(cfg.eval_seed ^ mix64(0x48554D ^ i as u64));
            let gen_seed = mix64(cfg.eval_seed ^ mix64(0x47454E ^ i as u64));
            let prompt = model.sample_prompt(cfg.prompt_len, prompt_seed)?;
            let human = model.sample_human_surrogate(&prompt, cfg.gen_len, human_seed)?;
            let reference = model.sample_unwatermarked(&prompt, cfg.gen_len, gen_seed)?;
            let wm = generate_watermarked(model, gamma_net, delta_net, key, &prompt, cfg.gen_len, gen_seed)?;
            let null_z = detect(&human, gamma_net, model.embeddings(), key, 0.0)?.z;
            let wm_z = detect(&wm.seq, gamma_net, model.embeddings(), key, 0.0)?.z;
            let sim = similarity(&wm.seq, &reference, &embedder, model.embeddings())?;
            Ok(Row {
                null_z,
                wm_z,
                sim,
                ppl_wm: oracle_ref.perplexity(&wm.seq)?,
                ppl_ref: oracle_ref.perplexity(&reference)?,
                wm: wm.seq,
            })
        })
        .collect();

    let mut null_z = Vec::with_capacity(cfg.n_test);
    let mut wm_z = Vec::with_capacity(cfg.n_test);
    let mut sims = Vec::with_capacity(cfg.n_test);
    let mut ppl_wm = Vec::with_capacity(cfg.n_test);
    let mut ppl_ref = Vec::with_capacity(cfg.n_test);
    let mut wm_texts = Vec::with_capacity(cfg.n_test);
    for row in rows {
        let row = row?;
        null_z.push(row.null_z);
        wm_z.push(row.wm_z);
        sims.push(row.sim);
        ppl_wm.push(row.ppl_wm);
        ppl_ref.push(row.ppl_ref);
        wm_texts.push(row.wm);
    }

    let threshold_fpr0 = calibrate_threshold(&null_z, 0.0)?;
    let threshold_fpr1 = calibrate_threshold(&null_z, 0.01)?;
    let (mean_null, std_null) = mean_std(&null_z);
    let (mean_wm_z, _) = mean_std(&wm_z);
    let (mean_sim, std_sim) = mean_std(&sims);
    let (mean_ppl_wm, _) = mean_std(&ppl_wm);
    let (mean_ppl_ref, _) = mean_std(&ppl_ref);
    let buckets = bucket_stats(&wm_texts, gamma_net, delta_net, model.embeddings(), model.categories())?;
    let tpr_at_fpr1 = tpr(&wm_z, threshold_fpr1)?;
    Ok(EvalReport {
        config_id: cfg.config_id.clone(),
        n_test: cfg.n_test,
        gen_len: cfg.gen_len,
        threshold_fpr0,
        threshold_fpr1,
        tpr_at_fpr0: tpr(&wm_z, threshold_fpr0)?,
        tpr_at_fpr1,
        mean_z_watermarked: mean_wm_z,
        mean_z_null: mean_null,
        var_z_null: std_null * std_null,
        mean_similarity: mean_sim,
        std_similarity: std_sim,
        mean_ppl_watermarked: mean_ppl_wm,
        mean_ppl_unwatermarked: mean_ppl_ref,
        buckets,
        tradeoff: TradeoffPoint {
            config_id: cfg.config_id.clone(),
            mean_z: mean_wm_z,
            tpr: tpr_at_fpr1,
            mean_cosine: mean_sim,
        },
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

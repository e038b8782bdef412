//! Watermark detection.
//!
//! The test statistic compares the green-token count against its null
//! expectation under token-specific splitting ratios:
//! `z = (|s|_G - sum(gamma_t)) / sqrt(sum(gamma_t (1 - gamma_t)))`.
//! Detection needs no access to the language model's logits: the gamma
//! network, the embedding table and the partition key reproduce every
//! membership from the token ids alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::GeneratorNet;
use crate::lm::{Embeddings, TokenSeq};
use crate::partition::{hard_membership, step_seed, PartitionKey, GAMMA_MAX, GAMMA_MIN};

/// Below this many scored tokens the Gaussian approximation behind the
/// z-test is unreliable and results carry a low-confidence flag.
pub const LOW_CONFIDENCE_LENGTH: usize = 25;

/// z statistic with its reliability flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZStat {
    pub z: f64,
    /// Set when fewer than [`LOW_CONFIDENCE_LENGTH`] tokens were scored.
    pub low_confidence: bool,
}

/// Dynamic-gamma one-sided z statistic over per-token green flags.
pub fn z_score(flags: &[bool], gammas: &[f64]) -> Result<ZStat> {
    if flags.len() != gammas.len() {
        return Err(Error::Input(format!(
            "flags length {} does not match gammas length {}",
            flags.len(),
            gammas.len()
        )));
    }
    if flags.is_empty() {
        return Err(Error::Input("z-score needs at least one scored token".into()));
    }
    if let Some(&bad) = gammas.iter().find(|&&g| !(GAMMA_MIN..=GAMMA_MAX).contains(&g)) {
        return Err(Error::Input(format!(
            "gamma {bad} outside the usable band [{GAMMA_MIN}, {GAMMA_MAX}]"
        )));
    }
    let green: f64 = flags.iter().filter(|&&f| f).count() as f64;
    let mean: f64 = gammas.iter().sum();
    let var: f64 = gammas.iter().map(|g| g * (1.0 - g)).sum();
    Ok(ZStat {
        z: (green - mean) / var.sqrt(),
        low_confidence: flags.len() < LOW_CONFIDENCE_LENGTH,
    })
}

/// Full detection outcome for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Number of scored tokens (the first token has no predecessor).
    pub scored: usize,
    pub green_count: usize,
    pub sum_gamma: f64,
    pub sum_var: f64,
    pub z: f64,
    pub threshold: f64,
    pub verdict: bool,
    pub low_confidence: bool,
    pub flags: Vec<bool>,
    /// Offset of the best window, when sliding-window detection was used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_offset: Option<usize>,
}

/// Per-token annotation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub position: usize,
    pub token: u32,
    pub green: bool,
    pub gamma: f64,
    pub delta: f64,
}

/// Scores every token after the first: flags and gammas in text order.
fn score_tokens(
    text: &TokenSeq,
    gamma_net: &GeneratorNet,
    embeddings: &Embeddings,
    key: PartitionKey,
) -> Result<(Vec<bool>, Vec<f64>)> {
    if text.len() < 2 {
        return Err(Error::Input("detection needs at least 2 tokens".into()));
    }
    text.validate_vocab(embeddings.len())?;
    let mut flags = Vec::with_capacity(text.len() - 1);
    let mut gammas = Vec::with_capacity(text.len() - 1);
    for w in text.tokens.windows(2) {
        let (prev, tok) = (w[0], w[1]);
        let gamma = gamma_net.output(embeddings.try_row(prev)?)?;
        let seed = step_seed(key, prev);
        flags.push(hard_membership(seed, tok, gamma)?);
        gammas.push(gamma);
    }
    Ok((flags, gammas))
}

/// One-sided z-test detection over a full text.
pub fn detect(
    text: &TokenSeq,
    gamma_net: &GeneratorNet,
    embeddings: &Embeddings,
    key: PartitionKey,
    threshold: f64,
) -> Result<DetectionResult> {
    let (flags, gammas) = score_tokens(text, gamma_net, embeddings, key)?;
    let stat = z_score(&flags, &gammas)?;
    Ok(DetectionResult {
        scored: flags.len(),
        green_count: flags.iter().filter(|&&f| f).count(),
        sum_gamma: gammas.iter().sum(),
        sum_var: gammas.iter().map(|g| g * (1.0 - g)).sum(),
        z: stat.z,
        threshold,
        verdict: stat.z > threshold,
        low_confidence: stat.low_confidence,
        flags,
        window_offset: None,
    })
}

fn best_window(flags: &[bool], gammas: &[f64], window: usize) -> (f64, usize) {
    // Prefix sums make every window O(1).
    let n = flags.len();
    let mut green = vec![0.0f64; n + 1];
    let mut mean = vec![0.0f64; n + 1];
    let mut var = vec![0.0f64; n + 1];
    for i in 0..n {
        green[i + 1] = green[i] + if flags[i] { 1.0 } else { 0.0 };
        mean[i + 1] = mean[i] + gammas[i];
        var[i + 1] = var[i] + gammas[i] * (1.0 - gammas[i]);
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_offset = 0;
    for start in 0..=(n - window) {
        let end = start + window;
        let z = (green[end] - green[start] - (mean[end] - mean[start]))
            / (var[end] - var[start]).sqrt();
        if z > best {
            best = z;
            best_offset = start;
        }
    }
    (best, best_offset)
}

fn check_window(text: &TokenSeq, window: usize) -> Result<()> {
    if window < LOW_CONFIDENCE_LENGTH {
        return Err(Error::Input(format!(
            "window must be >= {LOW_CONFIDENCE_LENGTH}, got {window}"
        )));
    }
    if text.len() < window + 1 {
        return Err(Error::Input(format!(
            "text of {} tokens is shorter than window {window} + 1",
            text.len()
        )));
    }
    Ok(())
}

/// Maximum z over all windows of `window` scored positions (stride 1).
///
/// Returns the best z and the offset (into the scored positions) achieving
/// it. Used against copy-paste dilution, where the watermarked span is a
/// small part of a longer text.
pub fn windowed_z(
    text: &TokenSeq,
    gamma_net: &GeneratorNet,
    embeddings: &Embeddings,
    key: PartitionKey,
    window: usize,
) -> Result<(f64, usize)> {
    check_window(text, window)?;
    let (flags, gammas) = score_tokens(text, gamma_net, embeddings, key)?;
    Ok(best_window(&flags, &gammas, window))
}

/// Sliding-window detection with a verdict against `threshold`.
pub fn detect_windowed(
    text: &TokenSeq,
    gamma_net: &GeneratorNet,
    embeddings: &Embeddings,
    key: PartitionKey,
    window: usize,
    threshold: f64,
) -> Result<DetectionResult> {
    check_window(text, window)?;
    let (flags, gammas) = score_tokens(text, gamma_net, embeddings, key)?;
    let (max_z, offset) = best_window(&flags, &gammas, window);
    let in_window = &flags[offset..offset + window];
    let in_gammas = &gammas[offset..offset + window];
    Ok(DetectionResult {
        scored: window,
        green_count: in_window.iter().filter(|&&f| f).count(),
        sum_gamma: in_gammas.iter().sum(),
        sum_var: in_gammas.iter().map(|g| g * (1.0 - g)).sum(),
        z: max_z,
        threshold,
        verdict: max_z > threshold,
        low_confidence: false,
        flags,
        window_offset: Some(offset),
    })
}

/// Per-token listing of membership and generator outputs, for rendering.
pub fn annotate(
    text: &TokenSeq,
    gamma_net: &GeneratorNet,
    delta_net: &GeneratorNet,
    embeddings: &Embeddings,
    key: PartitionKey,
) -> Result<Vec<TokenAnnotation>> {
    let (flags, gammas) = score_tokens(text, gamma_net, embeddings, key)?;
    let mut rows = Vec::with_capacity(flags.len());
    for (i, (&green, &gamma)) in flags.iter().zip(&gammas).enumerate() {
        let prev = text.tokens[i];
        let delta = delta_net.output(embeddings.try_row(prev)?)?;
        rows.push(TokenAnnotation {
            position: i + 1,
            token: text.tokens[i + 1],
            green,
            gamma,
            delta,
        });
    }
    Ok(rows)
}

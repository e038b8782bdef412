//! Desk-scale synthetic language model.
//!
//! A first-order model over a small vocabulary: each token id owns a
//! categorical next-token distribution and a unit-norm embedding row. Rows
//! are built with designated entropy classes so that generator networks have
//! structure to learn: low-entropy contexts pin the continuation to a
//! dominant successor, high-entropy contexts are near-uniform.
//!
//! Construction is a pure function of `(vocab_size, embed_dim, model_seed,
//! entropy_mix)`; models are persisted as that header and rebuilt, never
//! serialized numerically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Entropy class of a context token's next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntropyClass {
    LowEntropy,
    MidEntropy,
    HighEntropy,
}

/// Provenance tag carried by every token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Prompt,
    Human,
    Unwatermarked,
    Watermarked,
    Attacked,
}

/// A sequence of token ids over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub origin: Origin,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, origin: Origin) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence must be nonempty".into()));
        }
        Ok(Self { tokens, origin })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks every id against a vocabulary size.
    pub fn validate_vocab(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Token embedding table with unit-norm rows.
///
/// Detection only ever needs this table (plus the gamma network and the key),
/// so it is a standalone type rather than an accessor-bound view of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, token: u32) -> &[f64] {
        let i = token as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn try_row(&self, token: u32) -> Result<&[f64]> {
        if (token as usize) >= self.len() {
            return Err(Error::Input(format!(
                "token id {token} out of range for embedding table of {}",
                self.len()
            )));
        }
        Ok(self.row(token))
    }
}

/// Persistable model header; the model is rebuilt from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub model_seed: u64,
    pub entropy_mix: [f64; 3],
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 32,
            model_seed: 0,
            entropy_mix: [0.1, 0.3, 0.6],
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<SyntheticLM> {
        SyntheticLM::build(self.vocab_size, self.embed_dim, self.model_seed, self.entropy_mix)
    }
}

/// First-order synthetic language model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SyntheticLM {
    spec: ModelSpec,
    /// Row-major `V x V` next-token probabilities.
    context_table: Vec<f64>,
    embeddings: Embeddings,
    categories: Vec<EntropyClass>,
}

/// Dominant-successor mass of low-entropy rows is drawn from this range.
const LOW_DOMINANT_MIN: f64 = 0.9;
const LOW_DOMINANT_MAX: f64 = 0.97;
/// Residual mass of a low-entropy row spreads over this many tokens.
const LOW_TAIL_SUPPORT: usize = 8;
/// Support size of mid-entropy rows.
const MID_SUPPORT: usize = 10;
/// Dirichlet concentrations.
const MID_ALPHA: f64 = 2.0;
const HIGH_ALPHA: f64 = 20.0;
/// Weight of the per-class anchor direction blended into each embedding
/// row. Tokens of the same entropy class share a correlated component, the
/// way tokens of similar distributional role cluster in a trained model's
/// embedding space; without it the class of a context would be invisible
/// to the generator networks.
const CLASS_ANCHOR_WEIGHT: f64 = 0.8;

impl SyntheticLM {
    /// Builds the model deterministically from its header fields.
    pub fn build(vocab_size: usize, embed_dim: usize, model_seed: u64, entropy_mix: [f64; 3]) -> Result<Self> {
        if vocab_size < 16 {
            return Err(Error::Config(format!("vocab_size must be >= 16, got {vocab_size}")));
        }
        if embed_dim < 4 {
            return Err(Error::Config(format!("embed_dim must be >= 4, got {embed_dim}")));
        }
        if entropy_mix.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Config(format!("entropy_mix fractions must lie in [0,1], got {entropy_mix:?}")));
        }
        let total: f64 = entropy_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("entropy_mix must sum to 1, got {total}")));
        }

        let v = vocab_size;
        let mut cat_rng = SplitMix64::child(model_seed, 0x01);
        let mut row_rng = SplitMix64::child(model_seed, 0x02);
        let mut emb_rng = SplitMix64::child(model_seed, 0x03);

        // Entropy classes over a seeded permutation of the vocabulary.
        let n_low = (v as f64 * entropy_mix[0]).round() as usize;
        let n_mid = ((v as f64 * entropy_mix[1]).round() as usize).min(v - n_low);
        let mut order: Vec<u32> = (0..v as u32).collect();
        cat_rng.shuffle(&mut order);
        let mut categories = vec![EntropyClass::HighEntropy; v];
        for &t in &order[..n_low] {
            categories[t as usize] = EntropyClass::LowEntropy;
        }
        for &t in &order[n_low..n_low + n_mid] {
            categories[t as usize] = EntropyClass::MidEntropy;
        }

        // Dominant successors for low-entropy rows come from a second seeded
        // permutation, so no single token accumulates outsized stationary
        // mass (which would inflate repeated-bigram correlations).
        let mut dominants: Vec<u32> = (0..v as u32).collect();
        cat_rng.shuffle(&mut dominants);

        let mut context_table = vec![0.0f64; v * v];
        for token in 0..v {
            let row = &mut context_table[token * v..(token + 1) * v];
            match categories[token] {
                EntropyClass::LowEntropy => {
                    let mut main = dominants[token];
                    if main as usize == token {
                        main = dominants[(token + 1) % v];
                    }
                    let p_main = LOW_DOMINANT_MIN + (LOW_DOMINANT_MAX - LOW_DOMINANT_MIN) * row_rng.next_unit();
                    row[main as usize] = p_main;
                    let tail = pick_distinct(&mut row_rng, v, LOW_TAIL_SUPPORT, &[token as u32, main]);
                    let share = (1.0 - p_main) / tail.len() as f64;
                    for t in tail {
                        row[t as usize] += share;
                    }
                }
                EntropyClass::MidEntropy => {
                    let support = pick_distinct(&mut row_rng, v, MID_SUPPORT, &[token as u32]);
                    let mut weights: Vec<f64> = support.iter().map(|_| row_rng.next_gamma(MID_ALPHA)).collect();
                    let sum: f64 = weights.iter().sum();
                    for w in &mut weights {
                        *w /= sum;
                    }
                    for (t, w) in support.iter().zip(&weights) {
                        row[*t as usize] += w;
                    }
                }
                EntropyClass::HighEntropy => {
                    let mut sum = 0.0;
                    for p in row.iter_mut() {
                        *p = row_rng.next_gamma(HIGH_ALPHA);
                        sum += *p;
                    }
                    for p in row.iter_mut() {
                        *p /= sum;
                    }
                }
            }
            // Exact renormalization keeps the row-sum invariant tight.
            let sum: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= sum;
            }
        }

        // Unit-norm Gaussian embedding rows with a shared per-class anchor.
        let mut anchors = vec![0.0f64; 3 * embed_dim];
        for anchor in anchors.chunks_mut(embed_dim) {
            let mut norm2 = 0.0;
            for x in anchor.iter_mut() {
                *x = emb_rng.next_gaussian();
                norm2 += *x * *x;
            }
            let inv = norm2.sqrt().recip();
            for x in anchor.iter_mut() {
                *x *= inv;
            }
        }
        let mut data = vec![0.0f64; v * embed_dim];
        for token in 0..v {
            let class_idx = match categories[token] {
                EntropyClass::LowEntropy => 0,
                EntropyClass::MidEntropy => 1,
                EntropyClass::HighEntropy => 2,
            };
            let anchor = &anchors[class_idx * embed_dim..(class_idx + 1) * embed_dim];
            let row = &mut data[token * embed_dim..(token + 1) * embed_dim];
            let mut norm2 = 0.0;
            for (x, a) in row.iter_mut().zip(anchor) {
                *x = emb_rng.next_gaussian() + CLASS_ANCHOR_WEIGHT * a;
                norm2 += *x * *x;
            }
            let inv = norm2.sqrt().recip();
            for x in row.iter_mut() {
                *x *= inv;
            }
        }

        Ok(Self {
            spec: ModelSpec { vocab_size, embed_dim, model_seed, entropy_mix },
            context_table,
            embeddings: Embeddings { dim: embed_dim, data },
            categories,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn category(&self, token: u32) -> EntropyClass {
        self.categories[token as usize]
    }

    pub fn categories(&self) -> &[EntropyClass] {
        &self.categories
    }

    /// Next-token probability row for a context token.
    pub fn transition_row(&self, prev: u32) -> &[f64] {
        let v = self.spec.vocab_size;
        &self.context_table[prev as usize * v..(prev as usize + 1) * v]
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) >= self.spec.vocab_size {
            return Err(Error::Input(format!(
                "token id {token} out of range for vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        Ok(())
    }

    /// Log of the next-token distribution, probabilities floored at 1e-12.
    pub fn logits(&self, prev: u32) -> Result<Vec<f64>> {
        self.check_token(prev)?;
        Ok(self.transition_row(prev).iter().map(|&p| p.max(PROB_FLOOR).ln()).collect())
    }

    /// Embedding row of a token.
    pub fn embed(&self, token: u32) -> Result<&[f64]> {
        self.check_token(token)?;
        Ok(self.embeddings.row(token))
    }

    /// Draws a successor of `prev` from the stream (temperature 1.0).
    pub fn sample_next(&self, prev: u32, rng: &mut SplitMix64) -> Result<u32> {
        let logits = self.logits(prev)?;
        let probs = softmax(&logits);
        Ok(sample_index(&probs, rng.next_unit()) as u32)
    }

    /// Autoregressive multinomial sampling without a watermark. Returns the
    /// continuation only (the prompt is not echoed).
    pub fn sample_unwatermarked(&self, prompt: &TokenSeq, length: usize, gen_seed: u64) -> Result<TokenSeq> {
        self.sample_continuation(prompt, length, gen_seed, Origin::Unwatermarked)
    }

    /// Same sampler tagged as a human-written baseline-completion surrogate.
    pub fn sample_human_surrogate(&self, prompt: &TokenSeq, length: usize, gen_seed: u64) -> Result<TokenSeq> {
        self.sample_continuation(prompt, length, gen_seed, Origin::Human)
    }

    fn sample_continuation(&self, prompt: &TokenSeq, length: usize, gen_seed: u64, origin: Origin) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be nonempty".into()));
        }
        if length < 1 {
            return Err(Error::Input("generation length must be >= 1".into()));
        }
        prompt.validate_vocab(self.spec.vocab_size)?;
        let mut rng = SplitMix64::new(gen_seed);
        let mut prev = *prompt.tokens.last().expect("nonempty prompt");
        let mut tokens = Vec::with_capacity(length);
        for _ in 0..length {
            let next = self.sample_next(prev, &mut rng)?;
            tokens.push(next);
            prev = next;
        }
        TokenSeq::new(tokens, origin)
    }

    /// Samples a prompt: a uniform start token followed by model rollout.
    pub fn sample_prompt(&self, length: usize, seed: u64) -> Result<TokenSeq> {
        if length < 1 {
            return Err(Error::Input("prompt length must be >= 1".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let mut tokens = Vec::with_capacity(length);
        let mut prev = rng.next_below(self.spec.vocab_size) as u32;
        tokens.push(prev);
        for _ in 1..length {
            prev = self.sample_next(prev, &mut rng)?;
            tokens.push(prev);
        }
        TokenSeq::new(tokens, Origin::Prompt)
    }

    /// Oracle perplexity: exp of the mean negative log-likelihood of tokens
    /// 2..T under this model.
    pub fn perplexity(&self, seq: &TokenSeq) -> Result<f64> {
        if seq.len() < 2 {
            return Err(Error::Input("perplexity needs at least 2 tokens".into()));
        }
        seq.validate_vocab(self.spec.vocab_size)?;
        let mut nll = 0.0;
        for w in seq.tokens.windows(2) {
            let p = self.transition_row(w[0])[w[1] as usize].max(PROB_FLOOR);
            nll -= p.ln();
        }
        Ok((nll / (seq.len() - 1) as f64).exp())
    }

    #[cfg(test)]
    pub(crate) fn with_table_for_tests(vocab_size: usize, embed_dim: usize, context_table: Vec<f64>) -> Self {
        let mut emb_rng = SplitMix64::new(1);
        let mut data = vec![0.0f64; vocab_size * embed_dim];
        for row in data.chunks_mut(embed_dim) {
            let mut norm2 = 0.0;
            for x in row.iter_mut() {
                *x = emb_rng.next_gaussian();
                norm2 += *x * *x;
            }
            let inv = norm2.sqrt().recip();
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        Self {
            spec: ModelSpec { vocab_size, embed_dim, model_seed: 0, entropy_mix: [0.0, 0.0, 1.0] },
            context_table,
            embeddings: Embeddings { dim: embed_dim, data },
            categories: vec![EntropyClass::HighEntropy; vocab_size],
        }
    }
}

/// Stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Inverse-CDF draw from a probability vector using one uniform variate.
pub fn sample_index(probs: &[f64], unit: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if unit < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn pick_distinct(rng: &mut SplitMix64, vocab: usize, count: usize, exclude: &[u32]) -> Vec<u32> {
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let t = rng.next_below(vocab) as u32;
        if !exclude.contains(&t) && !picked.contains(&t) {
            picked.push(t);
        }
    }
    picked
}

/// Shannon entropy in nats of a probability row.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

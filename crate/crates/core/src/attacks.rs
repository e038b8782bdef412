//! Watermark-removal attack simulations.
//!
//! Copy-paste attacks dilute a watermarked span inside human text without
//! touching its tokens; sliding-window detection is the countermeasure.
//! The corruption attack is the desk-scale stand-in for paraphrasing: each
//! position is independently resampled from the model at a given rate.

use crate::error::{Error, Result};
use crate::lm::{Origin, SyntheticLM, TokenSeq};
use crate::rng::SplitMix64;

/// Inserts the watermarked text into the human text at `k` points.
///
/// `k = 1` inserts the whole text at one random position; `k = 3` splits it
/// into three contiguous near-equal segments (lengths differing by at most
/// one) and inserts them in order at three distinct non-overlapping
/// positions.
pub fn copy_paste(
    watermarked: &TokenSeq,
    human: &TokenSeq,
    k: usize,
    attack_seed: u64,
) -> Result<TokenSeq> {
    if k != 1 && k != 3 {
        return Err(Error::Input(format!("segment count must be 1 or 3, got {k}")));
    }
    if human.len() < watermarked.len() {
        return Err(Error::Input(format!(
            "human text of {} tokens cannot dilute a watermarked text of {}",
            human.len(),
            watermarked.len()
        )));
    }
    let mut rng = SplitMix64::new(attack_seed);
    let wm = &watermarked.tokens;
    let host = &human.tokens;

    // Near-equal contiguous split, earlier segments take the remainder.
    let mut segments: Vec<&[u32]> = Vec::with_capacity(k);
    let base = wm.len() / k;
    let extra = wm.len() % k;
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        segments.push(&wm[start..start + len]);
        start += len;
    }

    // Distinct ascending insertion points leave at least one host token
    // between consecutive segments.
    let mut points = Vec::with_capacity(k);
    while points.len() < k {
        let p = rng.next_below(host.len() + 1);
        if !points.contains(&p) {
            points.push(p);
        }
    }
    points.sort_unstable();

    let mut tokens = Vec::with_capacity(wm.len() + host.len());
    let mut cursor = 0;
    for (seg, &p) in segments.iter().zip(&points) {
        tokens.extend_from_slice(&host[cursor..p]);
        tokens.extend_from_slice(seg);
        cursor = p;
    }
    tokens.extend_from_slice(&host[cursor..]);
    TokenSeq::new(tokens, Origin::Attacked)
}

/// Independently resamples each position with probability `rate` from the
/// model's distribution given the (possibly already corrupted) previous
/// token. The first position has no predecessor and resamples uniformly.
pub fn corrupt(seq: &TokenSeq, rate: f64, attack_seed: u64, model: &SyntheticLM) -> Result<TokenSeq> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Input(format!("corruption rate must lie in [0,1], got {rate}")));
    }
    seq.validate_vocab(model.vocab_size())?;
    let mut rng = SplitMix64::new(attack_seed);
    let mut tokens = seq.tokens.clone();
    for i in 0..tokens.len() {
        if rng.next_unit() < rate {
            tokens[i] = if i == 0 {
                rng.next_below(model.vocab_size()) as u32
            } else {
                model.sample_next(tokens[i - 1], &mut rng)?
            };
        }
    }
    TokenSeq::new(tokens, Origin::Attacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{detect, windowed_z};
    use crate::generators::{GeneratorKind, GeneratorNet};
    use crate::partition::PartitionKey;
    use crate::pipeline::generate_watermarked;

    fn seq(tokens: Vec<u32>, origin: Origin) -> TokenSeq {
        TokenSeq::new(tokens, origin).unwrap()
    }

    /// Extracts maximal runs of watermarked tokens (tagged >= 1000).
    fn wm_runs(attacked: &[u32]) -> Vec<Vec<u32>> {
        let mut runs = Vec::new();
        let mut current = Vec::new();
        for &t in attacked {
            if t >= 1000 {
                current.push(t);
            } else if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            runs.push(current);
        }
        runs
    }

    #[test]
    fn copy_paste_preserves_length_and_tokens() {
        let wm = seq((1000..1200).collect(), Origin::Watermarked);
        let human = seq(vec![0; 600], Origin::Human);
        for k in [1, 3] {
            let attacked = copy_paste(&wm, &human, k, 7).unwrap();
            assert_eq!(attacked.len(), 800);
            assert_eq!(attacked.origin, Origin::Attacked);
            let mut wm_tokens: Vec<u32> =
                attacked.tokens.iter().cloned().filter(|&t| t >= 1000).collect();
            assert_eq!(wm_tokens, (1000..1200).collect::<Vec<u32>>());
            wm_tokens.clear();
        }
    }

    #[test]
    fn copy_paste_single_insertion_is_contiguous() {
        let wm = seq((1000..1100).collect(), Origin::Watermarked);
        let human = seq(vec![1; 300], Origin::Human);
        let attacked = copy_paste(&wm, &human, 1, 3).unwrap();
        let runs = wm_runs(&attacked.tokens);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0], (1000..1100).collect::<Vec<u32>>());
    }

    #[test]
    fn copy_paste_three_segments_near_equal_and_ordered() {
        let wm = seq((1000..1200).collect(), Origin::Watermarked);
        let human = seq(vec![1; 400], Origin::Human);
        let attacked = copy_paste(&wm, &human, 3, 11).unwrap();
        let runs = wm_runs(&attacked.tokens);
        assert_eq!(runs.len(), 3);
        let lens: Vec<usize> = runs.iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![67, 67, 66]);
        // Order preserved: concatenation reproduces the original.
        let rebuilt: Vec<u32> = runs.concat();
        assert_eq!(rebuilt, (1000..1200).collect::<Vec<u32>>());
    }

    #[test]
    fn copy_paste_rejects_bad_inputs() {
        let wm = seq(vec![1; 100], Origin::Watermarked);
        let human = seq(vec![0; 50], Origin::Human);
        assert!(copy_paste(&wm, &human, 1, 0).is_err()); // human too short
        let human = seq(vec![0; 200], Origin::Human);
        assert!(copy_paste(&wm, &human, 2, 0).is_err()); // unsupported k
    }

    #[test]
    fn copy_paste_is_deterministic() {
        let wm = seq((1000..1100).collect(), Origin::Watermarked);
        let human = seq(vec![1; 300], Origin::Human);
        let a = copy_paste(&wm, &human, 3, 42).unwrap();
        let b = copy_paste(&wm, &human, 3, 42).unwrap();
        assert_eq!(a, b);
    }

    fn test_model() -> SyntheticLM {
        SyntheticLM::build(64, 8, 7, [0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn corrupt_zero_rate_is_identity() {
        let m = test_model();
        let s = seq(vec![5, 10, 20, 30], Origin::Watermarked);
        let out = corrupt(&s, 0.0, 9, &m).unwrap();
        assert_eq!(out.tokens, s.tokens);
        assert_eq!(out.origin, Origin::Attacked);
    }

    #[test]
    fn corrupt_full_rate_leaves_chance_overlap() {
        let m = test_model();
        let prompt = m.sample_prompt(3, 1).unwrap();
        let original = m.sample_unwatermarked(&prompt, 200, 2).unwrap();
        let mut overlap = 0usize;
        let runs = 50;
        for i in 0..runs {
            let out = corrupt(&original, 1.0, 100 + i, &m).unwrap();
            overlap += out
                .tokens
                .iter()
                .zip(&original.tokens)
                .filter(|(a, b)| a == b)
                .count();
        }
        let frac = overlap as f64 / (runs as f64 * 200.0);
        // Chance level for a near-uniform model over 64 tokens.
        assert!(frac < 0.06, "overlap {frac}");
    }

    #[test]
    fn corrupt_changes_rate_fraction_of_positions() {
        let m = test_model();
        let prompt = m.sample_prompt(3, 5).unwrap();
        let original = m.sample_unwatermarked(&prompt, 200, 6).unwrap();
        let rate = 0.3;
        let mut changed = 0usize;
        let runs = 100;
        for i in 0..runs {
            let out = corrupt(&original, rate, 500 + i, &m).unwrap();
            changed += out
                .tokens
                .iter()
                .zip(&original.tokens)
                .filter(|(a, b)| a != b)
                .count();
        }
        let frac = changed as f64 / (runs as f64 * 200.0);
        assert!((frac - rate).abs() < 0.03, "changed fraction {frac}");
    }

    fn wm_setup(model: &SyntheticLM) -> (GeneratorNet, GeneratorNet, PartitionKey) {
        (
            GeneratorNet::constant(GeneratorKind::Gamma, 0.25, model.embed_dim(), 8).unwrap(),
            GeneratorNet::constant(GeneratorKind::Delta, 2.0, model.embed_dim(), 8).unwrap(),
            PartitionKey::new(77),
        )
    }

    #[test]
    fn corruption_degrades_z_monotonically() {
        let m = SyntheticLM::build(64, 8, 7, [0.25, 0.25, 0.5]).unwrap();
        let (g, d, key) = wm_setup(&m);
        let rates = [0.0, 0.1, 0.3, 0.5];
        let mut means = Vec::new();
        for (ri, &rate) in rates.iter().enumerate() {
            let mut sum = 0.0;
            let n = 60;
            for i in 0..n {
                let prompt = m.sample_prompt(4, 10_000 + i).unwrap();
                let wm = generate_watermarked(&m, &g, &d, key, &prompt, 150, 20_000 + i).unwrap();
                let attacked = corrupt(&wm.seq, rate, 30_000 + ri as u64 * 1000 + i, &m).unwrap();
                sum += detect(&attacked, &g, m.embeddings(), key, 4.0).unwrap().z;
            }
            means.push(sum / 60.0);
        }
        for w in means.windows(2) {
            assert!(w[1] <= w[0], "z means not non-increasing: {means:?}");
        }
    }

    #[test]
    fn windowed_detection_recovers_copy_pasted_watermark() {
        let m = SyntheticLM::build(64, 8, 7, [0.25, 0.25, 0.5]).unwrap();
        let (g, d, key) = wm_setup(&m);
        let prompt = m.sample_prompt(4, 3).unwrap();
        let wm = generate_watermarked(&m, &g, &d, key, &prompt, 200, 4).unwrap();
        let human = m.sample_human_surrogate(&prompt, 600, 5).unwrap();
        let unattacked = detect(&wm.seq, &g, m.embeddings(), key, 4.0).unwrap().z;
        let attacked = copy_paste(&wm.seq, &human, 1, 6).unwrap();
        let (max_z, _) = windowed_z(&attacked, &g, m.embeddings(), key, 200).unwrap();
        assert!(
            max_z >= 0.8 * unattacked,
            "windowed z {max_z} too far below unattacked {unattacked}"
        );
        // Plain full-text detection is heavily diluted by comparison.
        let full = detect(&attacked, &g, m.embeddings(), key, 4.0).unwrap().z;
        assert!(full < max_z);
    }
}

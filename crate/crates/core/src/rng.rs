//! Deterministic random streams.
//!
//! Everything in this crate that needs randomness draws it from a splitmix64
//! stream keyed by an explicit seed. The finalizer [`mix64`] doubles as the
//! stateless hash used by the vocabulary partition, so it is normative and
//! must not change: interoperating detectors in other languages reproduce it
//! bit for bit.

/// Splitmix64 finalizer. Stateless: one `u64` in, one `u64` out.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Weyl increment of the splitmix64 stream.
pub const GOLDEN_GAMMA: u64 = 0x9E3779B97F4A7C15;

/// Sequential splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent child stream; `tag` distinguishes siblings.
    pub fn child(seed: u64, tag: u64) -> Self {
        Self::new(mix64(seed ^ mix64(tag.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        // 53 significant bits, offset by half an ulp so 0 and 1 are excluded.
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by modulo; bias is ~bound/2^64.
    #[inline]
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller (consumes two uniforms).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) for shape >= 1, Marsaglia-Tsang squeeze method.
    pub fn next_gamma(&mut self, shape: f64) -> f64 {
        assert!(shape >= 1.0, "next_gamma requires shape >= 1");
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.next_gaussian();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_unit();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Standard Gumbel via inverse transform: g = -ln(-ln u).
    #[inline]
    pub fn next_gumbel(&mut self) -> f64 {
        -(-self.next_unit().ln()).ln()
    }

    /// Index sampled from an unnormalized nonnegative weight vector.
    pub fn next_categorical(&mut self, weights: &[f64]) -> usize {
        debug_assert!(!weights.is_empty());
        let total: f64 = weights.iter().sum();
        let mut target = self.next_unit() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

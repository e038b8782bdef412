//! Token-specific statistical text watermarking at desk scale.
//!
//! Watermarks are embedded during autoregressive generation by biasing the
//! logits of a seeded green vocabulary subset. Two small trainable networks
//! emit a per-token splitting ratio and watermark logit from the preceding
//! token's embedding; they are trained by multi-objective optimization of a
//! differentiable detection score against a semantic-similarity score.
//! Detection is a dynamic one-sided z-test that needs only the token ids,
//! the partition key, the gamma network and the embedding table.
//!
//! The crate is organized around that flow:
//!
//! - [`lm`]: synthetic first-order language model and token sequences
//! - [`partition`]: seeded green/red splits, hard and relaxed
//! - [`generators`]: the trainable ratio/logit networks
//! - [`pipeline`]: watermarked generation (hard path) and training rollouts
//! - [`detector`]: z-test detection, sliding-window detection, annotation
//! - [`losses`]: detection and semantic objectives with exact gradients
//! - [`trainer`]: multiple-gradient-descent training loop with Adam
//! - [`attacks`]: copy-paste and corruption attack simulations
//! - [`evalkit`]: threshold calibration, TPR, trade-off curves, statistics
//! - [`corpus`]: JSON-lines interchange format

pub mod attacks;
pub mod corpus;
pub mod curvefit;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod generators;
pub mod lm;
pub mod losses;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

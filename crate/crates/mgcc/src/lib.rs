//! Multimodal story-to-image generation at desk scale.
//!
//! The model stack: a frozen causal language backbone extended with trainable
//! image tokens, a cross-modal refinement module that attends image-token
//! hidden states against the full multimodal sequence, and an encoder-decoder
//! mapper that projects the refined tokens into a text-encoder-aligned
//! conditioning space. At inference an in-context-prompted layout generator
//! supplies object bounding boxes, and a pluggable backend renders the final
//! image from (conditioning, layout).
//!
//! Everything trainable lives in [`pipeline::TrainableParams`]; the backbone
//! and the toy encoders are frozen. Forward passes are pure and thread-safe;
//! only the trainer mutates parameters.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod exec;
pub mod grounding;
pub mod mapper;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pixels;
pub mod refinement;
pub mod util;

pub use error::{MgccError, Result};

use ndarray::Array2;

/// A sequence of equal-length real vectors: rows are sequence positions.
/// The universal carrier for embeddings, hidden states, and conditioning.
pub type FeatureMatrix<F> = Array2<F>;

/// Scalar precision used across the model. f32 is the training default,
/// f64 is used for gradient-check mode.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + ndarray::ScalarOperand
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Per-position binary flags marking image-token positions in a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTokenMask(Vec<bool>);

impl ImageTokenMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    /// Mask of `len` positions with exactly the trailing `n` set.
    pub fn trailing(len: usize, n: usize) -> Self {
        assert!(n <= len, "mask cannot have more set positions than length");
        let mut flags = vec![false; len];
        for f in flags.iter_mut().skip(len - n) {
            *f = true;
        }
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of set positions.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    /// Indices of set positions, in order.
    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

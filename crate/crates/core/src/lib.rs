//! Training classifiers on noisy labels with meta-learned soft labels.
//!
//! A base classifier is first warmed up on the noisy labels. A frozen copy
//! of it then serves as a feature extractor for a single-layer label
//! generator, which is trained so that one virtual gradient step of the
//! classifier on the generated soft labels lowers the loss on a small clean
//! meta set. The classifier itself is trained on the refreshed soft labels
//! plus an entropy penalty.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod matrix;
pub mod meta;
pub mod nn;
pub mod tape;

pub use error::{Error, Result};
pub use matrix::Matrix;

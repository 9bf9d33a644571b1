//! Domain-symmetric networks for unsupervised domain adaptation, built from
//! scratch on a small dense-matrix and reverse-mode differentiation core.
//!
//! Module map:
//!
//! - [`numerics`]: the [`Matrix`] type and stable softmax/log primitives.
//! - [`autodiff`]: a tape recording matrix ops and producing gradients.
//! - [`model`]: the feature extractor, the two task heads, and the baseline
//!   network with a domain discriminator.
//! - [`losses`]: every training objective, as graph builders and as plain
//!   evaluators.
//! - [`data`]: synthetic shifted datasets, CSV persistence, paired batching.
//! - [`training`]: schedules, SGD with momentum, and the training loops.
//! - [`eval`]: accuracy, the experiment grid driver, and CSV exports.
//! - [`seed`]: expansion of one seed into independent RNG streams.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Matrix;

// Runs the guide's code blocks as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/symmetric-head.md")]
    mod symmetric_head {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

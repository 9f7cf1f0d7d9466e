//! Learning with noisy labels at desk scale: a small reverse-mode tensor
//! library, contrastive pretraining with mixed-up views, a two-component GMM
//! noise detector and a MixMatch-style label corrector.

// NaN must fail validation, so `!(x > 0.0)` is intended.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]
pub mod contrastive;
pub mod data;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod semi;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

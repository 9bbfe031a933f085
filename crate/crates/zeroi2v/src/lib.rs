//! Zero-inference-cost adaptation of image transformers to video.
//!
//! The library implements two mechanisms on a small self-contained ViT stack
//! and verifies their claims exactly:
//!
//! * **Dual-headed spatial-temporal attention** — some attention heads query
//!   key/value pairs from temporally offset frames while the rest stay
//!   within-frame. No new weights, no new FLOPs; temporal modeling comes from
//!   relocating existing heads.
//! * **Mergeable linear adapters** — serial identity-plus-low-rank maps (and
//!   parallel low-rank updates) wrapped around the frozen projections. After
//!   training they fold into the original weights by structural
//!   reparameterization, so the deployed model has exactly the backbone's
//!   parameter count and FLOP count.
//!
//! Supporting machinery: a minimal reverse-mode autodiff tensor engine with a
//! FLOP meter, exact parameter/FLOP accounting, synthetic video tasks whose
//! labels are unrecoverable without temporal modeling, a training harness, a
//! binary checkpoint format, and a CLI tying it all together.

pub mod accounting;
pub mod adapt;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod merge;
pub mod rng;
pub mod stdha;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{DType, Elem, Tensor};

//! Localization guided multi-label attribute recognition.
//!
//! A frozen global classifier produces class activation maps; each map is
//! reduced to an activation box, compared against class-agnostic region
//! proposals by IoU, and the resulting affinity matrix weights per-proposal
//! local features before they are fused with the global logits.
//!
//! Module map:
//! - [`tensor_autodiff`]: tensors, reverse-mode tape, gradient checker
//! - [`backbone`]: small conv stack with a GAP + linear head and a split point
//! - [`cam`]: class activation maps and activation boxes
//! - [`proposals`]: edge-density window proposals, NMS, top-k, file format
//! - [`guidance`]: affinity matrix and guided fusion
//! - [`loss_metrics`]: weighted sigmoid cross entropy, mA and example metrics
//! - [`training`]: two-stage training, evaluation and ablations
//! - [`synthdata`]: procedural attribute dataset with ground-truth boxes

pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod loss_metrics;
pub mod proposals;
pub mod synthdata;
pub mod tensor_autodiff;
pub mod training;

pub use error::{LgError, Result};
pub use geometry::BBox;

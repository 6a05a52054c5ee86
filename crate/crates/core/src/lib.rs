//! Desk-scale object detection built around a deformation-constrained
//! pooling layer.
//!
//! The crate covers the whole path from synthetic data to evaluation:
//!
//! * [`tensor`]: dense `f64` arrays and the finite-difference gradient harness.
//! * [`layers`]: convolution, max-pooling, fully connected, ReLU and the two losses.
//! * [`defpool`]: def-pooling, the exhaustive quadratic part-placement oracle and
//!   the mapping between them.
//! * [`network`]: the staged network (trunk, part branch, stage branches) and its
//!   JSON model file.
//! * [`trainer`]: momentum SGD with freeze masks, stage-by-stage training and
//!   multi-phase schedules.
//! * [`pipeline`]: proposal rejection, box scoring, sub-box features, context
//!   fusion, box refinement and NMS.
//! * [`ensemble`]: score averaging with greedy model selection.
//! * [`eval`]: IoU, recall, average precision and mAP.
//! * [`data`]: the synthetic scene generator, proposal generator and manifests.
//! * [`ablation`]: the component-by-component benchmark harness.
//! * [`checks`]: gradient, degeneracy and oracle self-checks.

pub mod ablation;
pub mod checks;
pub mod data;
pub mod defpool;
pub mod ensemble;
mod error;
pub mod eval;
mod jsonl;
pub mod layers;
pub mod network;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

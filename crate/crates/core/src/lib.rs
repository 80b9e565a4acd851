//! Numerics engine for unified detection and multi-object tracking.
//!
//! The crate is organized around the stages of a detect-and-track pipeline:
//!
//! - [`tensor`]: dense row-major tensors, the small numeric kernels shared by
//!   every other module, and a finite-difference gradient checker.
//! - [`video`]: the folded image/video input representation and the
//!   temporal-aware sequential attention over multi-scale feature maps.
//! - [`grounding`]: text prompts, token-span distributions, and the
//!   region-text alignment losses (soft token loss, contrastive alignment).
//! - [`assignment`]: box geometry (IoU/GIoU), the Hungarian solver, the
//!   detection/tracking bipartite matching rules, and the combined loss.
//! - [`tracker`]: the frame-by-frame track lifecycle state machine with
//!   score filtering, NMS, inactive patience and re-identification.
//! - [`metrics`]: CLEAR-MOT counts, MOTA, IDF1, MT/ML and detection AP.
//! - [`harness`]: seeded synthetic scenarios, the end-to-end pipeline
//!   runner, and the gradient-check harness for every differentiable loss.

pub mod assignment;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod metrics;
pub mod tensor;
pub mod tracker;
pub mod video;

pub use error::{Error, Result};

//! Multi-oriented text detection by corner localization and position-sensitive
//! segmentation, as a deterministic geometry and numerics engine.
//!
//! The crate covers the whole non-network part of the detector:
//!
//! * [`geometry`]: rotated rectangles, containment, polygon IoU, minimum-area rectangles.
//! * [`tensorio`]: the `CFT1` tensor format and JSON-lines box/corner files.
//! * [`targets`]: corner ordering, corner squares, position-sensitive masks,
//!   default boxes, matching and offset encoding.
//! * [`losses`]: confidence (with online hard negative mining), Smooth L1 and Dice
//!   losses with analytic gradients.
//! * [`pipeline`]: corner decoding, sampling and grouping, rotated position-sensitive
//!   ROI average pooling, score filtering and rotated NMS.
//! * [`synth`]: synthetic scenes standing in for network outputs.
//! * [`eval`]: precision / recall / F-measure under rotated IoU matching.

// Negated comparisons are used on purpose so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod pipeline;
pub mod synth;
pub mod targets;
pub mod tensorio;

pub use error::{Error, Result};
pub use geometry::{AxisAlignedBox, Point, RotatedRect};
pub use tensorio::Tensor3D;

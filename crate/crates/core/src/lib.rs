//! Coarse-to-fine label assignment for oriented tiny object detection.
//!
//! The crate is organized bottom-up:
//!
//! * [`geom`]: oriented boxes, polygon conversion, rotated IoU and its
//!   Monte-Carlo oracle.
//! * [`gaussian`]: boxes as 2-D Gaussians, KLD / GWD / GJSD, and the
//!   two-component instance mixture used to gate final positives.
//! * [`prior`]: multi-level prior grids and the offset-driven prior update.
//! * [`assign`]: the coarse-to-fine assigner and a MaxIoU baseline.
//! * [`eval`]: rotated AP with tiny-object scale buckets.
//! * [`bias`]: positive-sample quantity/quality statistics and a synthetic
//!   scene generator.
//! * [`io`]: DOTA annotations, run configuration, offset and prediction files.
//! * [`selfcheck`]: oracle suites runnable from the command line.

// `!(x < y)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assign;
pub mod bias;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod geom;
pub mod io;
pub mod prior;
pub mod selfcheck;

pub use assign::{
    assign, maxiou_assign, AssignmentResult, DcflConfig, GtAssignment, GtInstance, Label,
    PredictionField,
};
pub use error::{Error, Result};
pub use gaussian::{Dgmm, Gaussian2};
pub use geom::{box_from_quad, mc_iou, quad_from_box, rotated_iou, OBox, Point, Quad};
pub use prior::{OffsetField, PriorField};

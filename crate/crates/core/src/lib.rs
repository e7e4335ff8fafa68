//! Conformal risk control for per-voxel uncertainty intervals.
//!
//! Heuristic intervals `[lo_j, hi_j]` (for example the outputs of a quantile
//! regressor) are inflated by nonnegative parameters until the expected
//! fraction of ground-truth voxels falling outside their interval is at most
//! a user tolerance `epsilon`. Four calibrators are provided:
//!
//! - [`calibrate::calibrate_scalar`]: one inflation shared by every voxel.
//! - [`calibrate::calibrate_kcrc`]: a fixed voxel-to-group partition, with an
//!   anchor vector found by [`anchor::solve_anchor`] and a one-dimensional
//!   backtracking search along `anchor + omega * 1`.
//! - [`calibrate::calibrate_semcrc`]: the same search where group membership
//!   is read per sample from a segmentation map.
//! - [`calibrate::calibrate_sembar`]: independent per-organ searches, giving
//!   risk control inside every segmented structure.
//!
//! [`synth`] generates phantom datasets with known noise structure and runs
//! Monte Carlo experiments; [`report`] implements the command-line verbs.

pub mod anchor;
pub mod calibrate;
pub mod error;
pub mod losses;
pub mod partition;
pub mod report;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};

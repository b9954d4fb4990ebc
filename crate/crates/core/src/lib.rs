//! Learning-based excavation planning for rigid objects in clutter.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: tray-frame point clouds, voxel grids and height maps.
//! - [`kinematics`]: the six-parameter task trajectory, its five excavation
//!   phases and the 4-DOF excavator arm.
//! - [`simulator`]: a deterministic surrogate of the excavation world used to
//!   generate labelled samples and to benchmark planners.
//! - [`learning`]: the voxel and trajectory-only success predictors, trained
//!   from scratch with hand-written gradients.
//! - [`planner`]: heuristic planners and the cross-entropy-method planner.
//! - [`config`], [`dataset`] and [`commands`]: run configuration, the binary
//!   dataset format and the command implementations behind the CLI.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod learning;
pub mod planner;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};

//! Success prediction from a voxelized scene and a task trajectory.
//!
//! `voxel_net` tiles the six normalized trajectory parameters over the voxel
//! grid as constant channels and runs a small 3D conv stack followed by a
//! fully connected head. `traj_net` sees only the six parameters. Both are
//! trained from scratch with hand-written gradients.

mod gradcheck;
mod input;
mod io;
mod metrics;
mod net;
mod train;

pub use gradcheck::{
    gradient_check, gradient_check_model, random_batch, tiny_specs, GradCheckReport, MAX_CHECK_PARAMS,
};
pub use input::{assemble_input, InputTensor, NetInput};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use metrics::{classifier_metrics, evaluate_classifier, evaluate_regressor, regressor_metrics, Metrics};
pub use net::{Mode, Model, Real, SceneEncoding, TensorInfo};
pub use train::{
    epoch_order, loss_and_grad, train, write_curve_csv, Adam, EpochRecord, LossGrad, TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::kinematics::{TaskTrajectory, TrajectoryRanges};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    VoxelNet,
    TrajNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    /// Sigmoid output, success probability.
    Classifier,
    /// Linear output, captured volume.
    Regressor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub stride: usize,
}

/// Architecture of a predictor. Conv kernels are always 3×3×3 with padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub head: Head,
    /// Spatial size of the network input after pooling.
    pub input_dims: [usize; 3],
    /// Average-pool factor applied to the voxel grid (1 = none).
    pub pool: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_widths: Vec<usize>,
    pub traj_ranges: TrajectoryRanges,
    /// Regression targets are volumes divided by this (cm³).
    pub volume_scale: f64,
}

impl NetworkSpec {
    pub const CHANNELS: usize = 7;

    pub fn voxel_net(head: Head, traj_ranges: TrajectoryRanges) -> Self {
        NetworkSpec {
            variant: Variant::VoxelNet,
            head,
            input_dims: [32, 32, 16],
            pool: 2,
            conv_blocks: [16, 32, 64, 128]
                .iter()
                .map(|&c| ConvBlock {
                    out_channels: c,
                    stride: 2,
                })
                .collect(),
            fc_widths: vec![512, 256, 128],
            traj_ranges,
            volume_scale: 450.0,
        }
    }

    pub fn traj_net(head: Head, traj_ranges: TrajectoryRanges) -> Self {
        NetworkSpec {
            variant: Variant::TrajNet,
            conv_blocks: vec![],
            ..Self::voxel_net(head, traj_ranges)
        }
    }

    /// Voxel grid dimensions the network consumes before pooling.
    pub fn grid_dims(&self) -> [usize; 3] {
        self.input_dims.map(|d| d * self.pool)
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_string()));
        match self.variant {
            Variant::VoxelNet => {
                if self.conv_blocks.is_empty() {
                    return fail("voxel_net needs at least one conv block");
                }
                if self.input_dims.contains(&0) || self.pool == 0 {
                    return fail("input dims and pool factor must be positive");
                }
            }
            Variant::TrajNet => {
                if !self.conv_blocks.is_empty() {
                    return fail("traj_net has no conv blocks");
                }
            }
        }
        if self.conv_blocks.iter().any(|b| b.out_channels == 0 || b.stride == 0) {
            return fail("conv blocks need positive channels and stride");
        }
        if self.fc_widths.contains(&0) {
            return fail("fully connected widths must be positive");
        }
        if (0..6).any(|i| !(self.traj_ranges.lo[i] < self.traj_ranges.hi[i])) {
            return fail("normalization ranges must satisfy lo < hi");
        }
        if !(self.volume_scale > 0.0) {
            return fail("volume scale must be positive");
        }
        Ok(())
    }
}

/// One collected trial: scene observation, executed trajectory and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcavationSample {
    pub episode_id: u32,
    pub trial_index: u16,
    pub voxels: VoxelGrid,
    pub traj: TaskTrajectory,
    /// cm³
    pub volume: f64,
    pub valid: bool,
    pub label: bool,
}

/// Training example in network input form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: NetInput,
    pub label: bool,
    /// cm³
    pub volume: f64,
}

impl Example {
    pub fn from_sample(spec: &NetworkSpec, s: &ExcavationSample) -> Result<Example> {
        Ok(Example {
            input: NetInput::new(spec, Some(&s.voxels), &s.traj)?,
            label: s.label,
            volume: s.volume,
        })
    }
}

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::kinematics::TaskTrajectory;

use super::{NetworkSpec, Variant};

/// Compact network input: pooled occupancy as sparse counts plus the six
/// normalized trajectory parameters. The tiled parameter channels are
/// constant, so they are never materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub params: [f64; 6],
    /// `(pooled cell index, occupied voxels in the cell)`, ascending by index.
    pub occ: Vec<(u32, u16)>,
}

impl NetInput {
    pub fn new(spec: &NetworkSpec, voxels: Option<&VoxelGrid>, traj: &TaskTrajectory) -> Result<NetInput> {
        Ok(NetInput {
            params: normalized_params(spec, traj)?,
            occ: match (spec.variant, voxels) {
                (Variant::TrajNet, _) => Vec::new(),
                (Variant::VoxelNet, Some(v)) => pooled_counts(spec, v)?,
                (Variant::VoxelNet, None) => return Err(Error::Spec("voxel_net input needs a voxel grid".into())),
            },
        })
    }

    /// Same scene occupancy, different trajectory.
    pub fn with_traj(&self, spec: &NetworkSpec, traj: &TaskTrajectory) -> Result<NetInput> {
        Ok(NetInput {
            params: normalized_params(spec, traj)?,
            occ: self.occ.clone(),
        })
    }
}

fn normalized_params(spec: &NetworkSpec, traj: &TaskTrajectory) -> Result<[f64; 6]> {
    if !traj.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::Spec("trajectory parameters must be finite".into()));
    }
    Ok(spec.traj_ranges.normalize(traj))
}

pub(crate) fn pooled_counts(spec: &NetworkSpec, voxels: &VoxelGrid) -> Result<Vec<(u32, u16)>> {
    let g = spec.grid_dims();
    if voxels.dims() != g {
        return Err(Error::Spec(format!(
            "voxel grid is {:?}, network expects {:?}",
            voxels.dims(),
            g
        )));
    }
    let [nx, ny, nz] = spec.input_dims;
    let p = spec.pool;
    let mut counts = vec![0u16; nx * ny * nz];
    for idx in voxels.occupied() {
        let i = idx % g[0];
        let j = idx / g[0] % g[1];
        let k = idx / (g[0] * g[1]);
        counts[i / p + nx * (j / p + ny * (k / p))] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i as u32, c))
        .collect())
}

/// Dense 7-channel network input, channel-major, x fastest within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl InputTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.iter().product::<usize>();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Occupancy (average-pooled to the network input size) followed by six
/// constant channels holding the normalized trajectory parameters.
pub fn assemble_input(voxels: &VoxelGrid, traj: &TaskTrajectory, spec: &NetworkSpec) -> Result<InputTensor> {
    let params = normalized_params(spec, traj)?;
    let n = spec.input_dims.iter().product::<usize>();
    let scale = 1.0 / (spec.pool.pow(3) as f64);
    let mut data = vec![0.0; n * NetworkSpec::CHANNELS];
    for (idx, c) in pooled_counts(spec, voxels)? {
        data[idx as usize] = c as f64 * scale;
    }
    for (c, p) in params.iter().enumerate() {
        data[(c + 1) * n..(c + 2) * n].fill(*p);
    }
    Ok(InputTensor {
        dims: spec.input_dims,
        data,
    })
}

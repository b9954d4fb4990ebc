//! Tray-frame point cloud processing: rigid transforms, cuboid cropping,
//! voxelization and height maps.
//!
//! All binning shares one rule: a coordinate `c` falls in cell
//! `floor((c - origin) / resolution)`, cells are half-open and points on the
//! upper face of the covered box are dropped.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.check()?;
        Ok(t)
    }

    /// Rotation by `yaw` about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn check(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidTransform(format!("det(R) = {det}")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuboidRegion {
    pub center: Point3,
    pub half_extents: Vector3<f64>,
}

impl CuboidRegion {
    pub fn new(center: Point3, half_extents: Vector3<f64>) -> Result<Self> {
        if half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidSpec("cuboid half extents must be positive".into()));
        }
        Ok(CuboidRegion { center, half_extents })
    }

    /// Closed-bound membership.
    #[inline]
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.half_extents[i])
    }

    /// Closed-bound membership of the xy footprint shrunk by `margin`.
    pub fn footprint_contains(&self, x: f64, y: f64, margin: f64) -> bool {
        (x - self.center.x).abs() <= self.half_extents.x - margin
            && (y - self.center.y).abs() <= self.half_extents.y - margin
    }

    pub fn min_corner(&self) -> Point3 {
        self.center - self.half_extents
    }

    pub fn max_corner(&self) -> Point3 {
        self.center + self.half_extents
    }
}

impl Default for CuboidRegion {
    /// The simulated excavation cuboid, 0.38 × 0.4 × 0.3 m, centred on the
    /// tray-frame origin.
    fn default() -> Self {
        CuboidRegion {
            center: Point3::origin(),
            half_extents: Vector3::new(0.19, 0.2, 0.15),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Camera,
    Tray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame) -> Self {
        PointCloud { points, frame }
    }

    fn require_tray(&self) -> Result<()> {
        if self.frame != Frame::Tray {
            return Err(Error::FrameMismatch {
                expected: Frame::Tray,
                found: self.frame,
            });
        }
        Ok(())
    }
}

/// Applies `t` to every point. The caller states the frame of the result.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform, frame: Frame) -> Result<PointCloud> {
    t.check()?;
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        frame,
    })
}

pub fn crop_cuboid(cloud: &PointCloud, region: &CuboidRegion) -> Result<PointCloud> {
    cloud.require_tray()?;
    Ok(PointCloud {
        points: cloud.points.iter().filter(|p| region.contains(p)).copied().collect(),
        frame: Frame::Tray,
    })
}

#[inline]
fn bin(coord: f64, origin: f64, resolution: f64, n: usize) -> Option<usize> {
    let idx = ((coord - origin) / resolution).floor();
    if idx >= 0.0 && idx < n as f64 {
        Some(idx as usize)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub resolution: f64,
    pub origin: Point3,
}

impl GridSpec {
    /// Grid of `dims` cells centred on the tray-frame origin.
    pub fn centered(dims: [usize; 3], resolution: f64) -> Self {
        let half = |n: usize| -(n as f64) * resolution / 2.0;
        GridSpec {
            dims,
            resolution,
            origin: Point3::new(half(dims[0]), half(dims[1]), half(dims[2])),
        }
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().product()
    }

    fn check(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidSpec("grid dims must be nonzero".into()));
        }
        Ok(())
    }

    pub fn cell_of(&self, p: &Point3) -> Option<[usize; 3]> {
        Some([
            bin(p.x, self.origin.x, self.resolution, self.dims[0])?,
            bin(p.y, self.origin.y, self.resolution, self.dims[1])?,
            bin(p.z, self.origin.z, self.resolution, self.dims[2])?,
        ])
    }
}

impl Default for GridSpec {
    /// 64 × 64 × 32 cells at 0.01 m, centred on the tray origin.
    fn default() -> Self {
        GridSpec::centered([64, 64, 32], 0.01)
    }
}

/// Binary occupancy grid, bit-packed with x fastest, then y, then z. Bit `i`
/// of byte `b` is cell `8 b + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    bits: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        VoxelGrid {
            bits: vec![0; spec.cell_count().div_ceil(8)],
            spec,
        }
    }

    pub fn from_packed(spec: GridSpec, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != spec.cell_count().div_ceil(8) {
            return Err(Error::Data(format!(
                "packed occupancy has {} bytes, expected {}",
                bits.len(),
                spec.cell_count().div_ceil(8)
            )));
        }
        Ok(VoxelGrid { spec, bits })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.spec.dims;
        i + nx * (j + ny * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.get_flat(self.index(i, j, k))
    }

    #[inline]
    pub fn get_flat(&self, idx: usize) -> bool {
        self.bits[idx / 8] >> (idx % 8) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        let idx = self.index(i, j, k);
        self.bits[idx / 8] |= 1 << (idx % 8);
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Flat indices of occupied cells in ascending order.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.spec.cell_count();
        self.bits.iter().enumerate().flat_map(move |(b, &byte)| {
            (0..8)
                .filter(move |i| byte >> i & 1 == 1)
                .map(move |i| b * 8 + i)
                .filter(move |&idx| idx < n)
        })
    }
}

pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Result<VoxelGrid> {
    spec.check()?;
    cloud.require_tray()?;
    let mut grid = VoxelGrid::empty(*spec);
    for p in &cloud.points {
        if let Some([i, j, k]) = spec.cell_of(p) {
            grid.set(i, j, k);
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightMapSpec {
    pub dims: [usize; 2],
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub floor_z: f64,
}

impl HeightMapSpec {
    /// Cells of `cell_size` covering the xy footprint of `region`, rounded up
    /// to whole cells from the footprint's minimum corner.
    pub fn covering(region: &CuboidRegion, cell_size: f64, floor_z: f64) -> Self {
        let min = region.min_corner();
        let n = |extent: f64| ((2.0 * extent / cell_size) - 1e-9).ceil().max(1.0) as usize;
        HeightMapSpec {
            dims: [n(region.half_extents.x), n(region.half_extents.y)],
            cell_size,
            origin: [min.x, min.y],
            floor_z,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidSpec("height map dims must be nonzero".into()));
        }
        Ok(())
    }
}

/// Per-cell maximum surface height, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub spec: HeightMapSpec,
    pub heights: Vec<f64>,
}

impl HeightMap {
    pub fn flat(spec: HeightMapSpec, z: f64) -> Self {
        HeightMap {
            heights: vec![z.max(spec.floor_z); spec.dims[0] * spec.dims[1]],
            spec,
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.spec.dims
    }

    pub fn cell_count(&self) -> usize {
        self.heights.len()
    }

    #[inline]
    pub fn height(&self, i: usize, j: usize) -> f64 {
        self.heights[i + self.spec.dims[0] * j]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = &self.spec;
        Some((
            bin(x, s.origin[0], s.cell_size, s.dims[0])?,
            bin(y, s.origin[1], s.cell_size, s.dims[1])?,
        ))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let s = &self.spec;
        (
            s.origin[0] + (i as f64 + 0.5) * s.cell_size,
            s.origin[1] + (j as f64 + 0.5) * s.cell_size,
        )
    }

    pub fn surface_height(&self, x: f64, y: f64) -> Result<f64> {
        let (i, j) = self.cell_of(x, y).ok_or(Error::OutOfRange { x, y })?;
        Ok(self.height(i, j))
    }
}

pub fn build_height_map(cloud: &PointCloud, spec: &HeightMapSpec) -> Result<HeightMap> {
    spec.check()?;
    cloud.require_tray()?;
    let mut hm = HeightMap::flat(*spec, spec.floor_z);
    for p in &cloud.points {
        if let Some((i, j)) = hm.cell_of(p.x, p.y) {
            let h = &mut hm.heights[i + spec.dims[0] * j];
            if p.z > *h {
                *h = p.z;
            }
        }
    }
    Ok(hm)
}

pub fn surface_height(hm: &HeightMap, x: f64, y: f64) -> Result<f64> {
    hm.surface_height(x, y)
}

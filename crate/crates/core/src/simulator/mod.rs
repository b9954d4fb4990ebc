//! Deterministic surrogate of the excavation world.
//!
//! Rigid convex objects are dropped into the tray with a vertical stacking
//! rule, the scene is observed by vertical ray casting, and an excavation
//! captures the objects whose centroids fall inside the bucket's swept prism.

mod excavation;
pub mod hull;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{CuboidRegion, Frame, Point3, PointCloud, RigidTransform};

pub use excavation::{
    capture_candidates, dump_and_settle, execute_excavation, label_outcome, ExcavationOutcome, OutcomeReason,
    SimParams, SUCCESS_THRESHOLD_CM3,
};
pub use hull::{convex_hull, ConvexHull};

/// Object volumes are rounded to multiples of 2⁻³⁶ cm³ so that every sum of
/// scene volumes is exact in f64.
pub const VOLUME_QUANTUM: f64 = 1.0 / (1u64 << 36) as f64;

pub fn quantize_volume(v: f64) -> f64 {
    (v / VOLUME_QUANTUM).round() * VOLUME_QUANTUM
}

#[derive(Debug, Clone, PartialEq)]
struct WorldCache {
    min: Point3,
    max: Point3,
    centroid: Point3,
    /// Face planes `n · p <= offset`, unnormalised.
    planes: Vec<(Vector3<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidObject {
    pub id: u32,
    /// Convex hull vertices in the body frame.
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    /// cm³
    pub volume: f64,
    /// Volume centroid in the body frame.
    pub centroid: Point3,
    pub pose: RigidTransform,
    /// g/cm³
    pub density: f64,
    world: WorldCache,
}

impl RigidObject {
    /// Builds an object from the convex hull of `points` (meters, body frame).
    pub fn from_points(id: u32, points: &[Point3], density: f64) -> Option<RigidObject> {
        Self::from_hull(id, convex_hull(points)?, density)
    }

    /// Builds an object whose `vertices` are already convex, keeping their
    /// order.
    pub fn from_hull_vertices(id: u32, vertices: &[Point3], density: f64) -> Option<RigidObject> {
        let faces = hull::hull_faces(vertices)?;
        Self::from_hull(
            id,
            ConvexHull {
                vertices: vertices.to_vec(),
                faces,
            },
            density,
        )
    }

    fn from_hull(id: u32, hull: ConvexHull, density: f64) -> Option<RigidObject> {
        let (vol, centroid) = hull.volume_and_centroid();
        if !(vol > 0.0) {
            return None;
        }
        let mut obj = RigidObject {
            id,
            vertices: hull.vertices,
            faces: hull.faces,
            volume: quantize_volume(vol * 1e6),
            centroid,
            pose: RigidTransform::identity(),
            density,
            world: WorldCache {
                min: Point3::origin(),
                max: Point3::origin(),
                centroid: Point3::origin(),
                planes: vec![],
            },
        };
        obj.set_pose(RigidTransform::identity());
        Some(obj)
    }

    pub fn set_pose(&mut self, pose: RigidTransform) {
        self.pose = pose;
        let world: Vec<Point3> = self.vertices.iter().map(|v| pose.apply(v)).collect();
        let mut min = world[0];
        let mut max = world[0];
        for p in &world {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        let planes = self
            .faces
            .iter()
            .map(|f| {
                let n = (world[f[1]] - world[f[0]]).cross(&(world[f[2]] - world[f[0]]));
                (n, n.dot(&world[f[0]].coords))
            })
            .collect();
        self.world = WorldCache {
            min,
            max,
            centroid: pose.apply(&self.centroid),
            planes,
        };
    }

    pub fn world_vertices(&self) -> Vec<Point3> {
        self.vertices.iter().map(|v| self.pose.apply(v)).collect()
    }

    pub fn world_centroid(&self) -> Point3 {
        self.world.centroid
    }

    pub fn aabb(&self) -> (Point3, Point3) {
        (self.world.min, self.world.max)
    }

    pub fn bottom_z(&self) -> f64 {
        self.world.min.z
    }

    pub fn top_z(&self) -> f64 {
        self.world.max.z
    }

    /// kg
    pub fn mass(&self) -> f64 {
        self.volume * self.density / 1000.0
    }

    fn footprint_overlaps(&self, other: &RigidObject) -> bool {
        self.world.min.x < other.world.max.x
            && other.world.min.x < self.world.max.x
            && self.world.min.y < other.world.max.y
            && other.world.min.y < self.world.max.y
    }

    /// Highest point where the vertical line through `(x, y)` meets the
    /// object, if it does.
    pub fn ray_top(&self, x: f64, y: f64) -> Option<f64> {
        let w = &self.world;
        if x < w.min.x || x > w.max.x || y < w.min.y || y > w.max.y {
            return None;
        }
        let mut top = f64::INFINITY;
        let mut bottom = f64::NEG_INFINITY;
        for (n, off) in &w.planes {
            let rhs = off - n.x * x - n.y * y;
            if n.z > 0.0 {
                top = top.min(rhs / n.z);
            } else if n.z < 0.0 {
                bottom = bottom.max(rhs / n.z);
            } else if rhs < 0.0 {
                return None;
            }
        }
        (top.is_finite() && bottom <= top + 1e-12).then_some(top)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGenConfig {
    pub n_objects: (usize, usize),
    pub vertex_count: (usize, usize),
    /// Per-axis maximum coordinate range, meters.
    pub coord_max: (f64, f64),
    pub tray: CuboidRegion,
    pub floor_z: f64,
    pub density: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        let tray = CuboidRegion::default();
        SceneGenConfig {
            n_objects: (50, 400),
            vertex_count: (10, 50),
            coord_max: (0.01, 0.05),
            floor_z: tray.center.z - tray.half_extents.z,
            tray,
            density: 6.0,
        }
    }
}

impl SceneGenConfig {
    pub fn check(&self) -> Result<()> {
        let ok = self.n_objects.0 <= self.n_objects.1
            && self.vertex_count.0 >= 4
            && self.vertex_count.0 <= self.vertex_count.1
            && self.coord_max.0 > 0.0
            && self.coord_max.0 <= self.coord_max.1
            && self.density > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "scene generation ranges must be nonempty and ordered".into(),
            ))
        }
    }
}

pub fn gen_object(cfg: &SceneGenConfig, id: u32, rng: &mut impl Rng) -> RigidObject {
    loop {
        let n = rng.random_range(cfg.vertex_count.0..=cfg.vertex_count.1);
        let axis: [f64; 3] = std::array::from_fn(|_| rng.random_range(cfg.coord_max.0..=cfg.coord_max.1));
        let raw: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..=axis[0]),
                    rng.random_range(0.0..=axis[1]),
                    rng.random_range(0.0..=axis[2]),
                )
            })
            .collect();
        if let Some(obj) = RigidObject::from_points(id, &raw, cfg.density) {
            return obj;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClutterScene {
    /// Objects in the tray, in placement order.
    pub objects: Vec<RigidObject>,
    pub tray: CuboidRegion,
    pub floor_z: f64,
    /// Objects held in the bucket after an excavation, awaiting the dump.
    pub bucket: Vec<RigidObject>,
    pub pending_volume: f64,
    pub dumped_volume: f64,
}

impl ClutterScene {
    pub fn empty(tray: CuboidRegion, floor_z: f64) -> Self {
        ClutterScene {
            objects: vec![],
            tray,
            floor_z,
            bucket: vec![],
            pending_volume: 0.0,
            dumped_volume: 0.0,
        }
    }

    pub fn in_tray_volume(&self) -> f64 {
        self.objects.iter().map(|o| o.volume).sum()
    }

    /// Drops `obj` with its centroid at `(x, y)` and the given yaw onto the
    /// current pile.
    pub fn place(&mut self, mut obj: RigidObject, x: f64, y: f64, yaw: f64) {
        let rot = RigidTransform::from_yaw(yaw, Vector3::zeros());
        let c = rot.apply(&obj.centroid);
        obj.set_pose(RigidTransform::from_yaw(yaw, Vector3::new(x - c.x, y - c.y, 0.0)));
        settle(&mut obj, &self.objects, self.floor_z);
        self.objects.push(obj);
    }

    /// Re-applies the stacking rule to every object in placement order.
    pub fn resettle(&mut self) {
        for i in 0..self.objects.len() {
            let (earlier, rest) = self.objects.split_at_mut(i);
            settle(&mut rest[0], earlier, self.floor_z);
        }
    }

    /// Snapshot: magic `EXCS`, version, object count, then per object id,
    /// vertex count, vertices, volume and pose (row-major rotation then
    /// translation). Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"EXCS");
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.objects.len() as u32).to_le_bytes());
        for o in &self.objects {
            out.extend_from_slice(&o.id.to_le_bytes());
            out.extend_from_slice(&(o.vertices.len() as u16).to_le_bytes());
            for v in &o.vertices {
                for c in v.iter() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            out.extend_from_slice(&o.volume.to_le_bytes());
            for r in 0..3 {
                for c in 0..3 {
                    out.extend_from_slice(&o.pose.rotation[(r, c)].to_le_bytes());
                }
            }
            for c in o.pose.translation.iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    /// Restores objects from a snapshot into a scene over `tray`. Hull faces
    /// are rebuilt from the stored vertices; volumes are taken as stored.
    pub fn from_bytes(bytes: &[u8], tray: CuboidRegion, floor_z: f64, density: f64) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != b"EXCS" {
            return Err(Error::Data("bad scene snapshot magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Data(format!("unsupported snapshot version {version}")));
        }
        let count = r.u32()?;
        let mut scene = ClutterScene::empty(tray, floor_z);
        for _ in 0..count {
            let id = r.u32()?;
            let nv = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let verts: Vec<Point3> = (0..nv)
                .map(|_| Ok(Point3::new(r.f64()?, r.f64()?, r.f64()?)))
                .collect::<Result<_>>()?;
            let volume = r.f64()?;
            let mut rot = nalgebra::Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    rot[(i, j)] = r.f64()?;
                }
            }
            let t = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            let mut obj = RigidObject::from_hull_vertices(id, &verts, density)
                .ok_or_else(|| Error::Data(format!("object {id} is degenerate")))?;
            obj.volume = volume;
            obj.set_pose(RigidTransform::new(rot, t)?);
            scene.objects.push(obj);
        }
        Ok(scene)
    }
}

const SNAPSHOT_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Data("truncated scene snapshot".into()))?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Vertical drop: the object's lowest vertex comes to rest on the highest
/// top among earlier objects whose footprints overlap it, or on the floor.
fn settle(obj: &mut RigidObject, earlier: &[RigidObject], floor_z: f64) {
    let rest = earlier
        .iter()
        .filter(|o| o.footprint_overlaps(obj))
        .map(|o| o.top_z())
        .fold(floor_z, f64::max);
    let dz = rest - obj.bottom_z();
    if dz != 0.0 {
        let mut pose = obj.pose;
        pose.translation.z += dz;
        obj.set_pose(pose);
    }
}

pub fn gen_scene(cfg: &SceneGenConfig, rng: &mut impl Rng) -> ClutterScene {
    let n = rng.random_range(cfg.n_objects.0..=cfg.n_objects.1);
    let mut scene = ClutterScene::empty(cfg.tray, cfg.floor_z);
    let lo = cfg.tray.min_corner();
    let hi = cfg.tray.max_corner();
    for id in 0..n {
        let obj = gen_object(cfg, id as u32, rng);
        let x = rng.random_range(lo.x..=hi.x);
        let y = rng.random_range(lo.y..=hi.y);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        scene.place(obj, x, y, yaw);
    }
    scene
}

/// Vertical ray cast on a raster of `spacing` over the tray footprint. Each
/// ray yields the highest object surface it meets, or the floor.
pub fn render_cloud(scene: &ClutterScene, spacing: f64) -> Result<PointCloud> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "raster spacing must be positive, got {spacing}"
        )));
    }
    let lo = scene.tray.min_corner();
    let nx = ((2.0 * scene.tray.half_extents.x / spacing) - 1e-9).ceil().max(1.0) as usize;
    let ny = ((2.0 * scene.tray.half_extents.y / spacing) - 1e-9).ceil().max(1.0) as usize;

    // bucket objects by footprint into a coarse grid
    let cell = 0.02;
    let gx = ((nx as f64 * spacing) / cell).ceil() as usize + 1;
    let gy = ((ny as f64 * spacing) / cell).ceil() as usize + 1;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); gx * gy];
    let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    for (k, o) in scene.objects.iter().enumerate() {
        let (mn, mx) = o.aabb();
        let (i0, i1) = (clamp((mn.x - lo.x) / cell, gx), clamp((mx.x - lo.x) / cell, gx));
        let (j0, j1) = (clamp((mn.y - lo.y) / cell, gy), clamp((mx.y - lo.y) / cell, gy));
        for j in j0..=j1 {
            for i in i0..=i1 {
                buckets[i + gx * j].push(k);
            }
        }
    }

    let mut points = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let y = lo.y + (j as f64 + 0.5) * spacing;
        for i in 0..nx {
            let x = lo.x + (i as f64 + 0.5) * spacing;
            let b = clamp((x - lo.x) / cell, gx) + gx * clamp((y - lo.y) / cell, gy);
            let z = buckets[b]
                .iter()
                .filter_map(|&k| scene.objects[k].ray_top(x, y))
                .fold(scene.floor_z, f64::max);
            points.push(Point3::new(x, y, z));
        }
    }
    Ok(PointCloud::new(points, Frame::Tray))
}

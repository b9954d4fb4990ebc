//! Task-space excavation trajectories and the 4-DOF excavator arm.
//!
//! A [`TaskTrajectory`] is expanded into six key bucket poses (home, attack,
//! penetrate, drag, close, lift), interpolated in task space and converted to
//! joint space with closed-form inverse kinematics.
//!
//! Angle conventions: the arm moves in the vertical swing plane at swing angle
//! `q1`. Inside that plane `r` points away from the base and `z` up. Boom,
//! stick and bucket angles are relative; the bucket angle in the plane is
//! `alpha = q2 + q3 + q4`, so `alpha = 0` is horizontal pointing away from the
//! base and `alpha = -π/2` points straight down.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{CuboidRegion, HeightMap, Point3};

/// Six excavation parameters: attack point `(x, y)` in the tray frame,
/// attack angle `alpha`, penetration depth `d`, drag length `l` and closing
/// angle `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskTrajectory {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub d: f64,
    pub l: f64,
    pub beta: f64,
}

impl TaskTrajectory {
    pub const NAMES: [&'static str; 6] = ["x", "y", "alpha", "d", "l", "beta"];

    pub fn new(x: f64, y: f64, alpha: f64, d: f64, l: f64, beta: f64) -> Self {
        TaskTrajectory {
            x,
            y,
            alpha,
            d,
            l,
            beta,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.alpha, self.d, self.l, self.beta]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        TaskTrajectory::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    /// Point of attack.
    pub fn poa(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn is_well_formed(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.d >= 0.0 && self.l >= 0.0
    }

    pub fn to_le_bytes(&self) -> [u8; 48] {
        let mut out = [0u8; 48];
        for (i, v) in self.to_array().iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; 48]) -> Self {
        let mut a = [0.0; 6];
        for (i, v) in a.iter_mut().enumerate() {
            *v = f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        }
        TaskTrajectory::from_array(a)
    }
}

/// Per-parameter `[lo, hi]` ranges used to map trajectories to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRanges {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl TrajectoryRanges {
    /// Affine on each half of the range, so `lo`, the midpoint and `hi` map
    /// exactly to −1, 0 and 1.
    pub fn normalize(&self, t: &TaskTrajectory) -> [f64; 6] {
        let a = t.to_array();
        std::array::from_fn(|i| {
            let c = self.center(i);
            if a[i] <= c {
                (a[i] - c) / (c - self.lo[i])
            } else {
                (a[i] - c) / (self.hi[i] - c)
            }
        })
    }

    pub fn denormalize(&self, n: &[f64; 6]) -> TaskTrajectory {
        TaskTrajectory::from_array(std::array::from_fn(|i| {
            let c = self.center(i);
            if n[i] <= 0.0 {
                c + n[i] * (c - self.lo[i])
            } else {
                c + n[i] * (self.hi[i] - c)
            }
        }))
    }

    fn center(&self, i: usize) -> f64 {
        0.5 * (self.lo[i] + self.hi[i])
    }

    pub fn midpoint(&self) -> TaskTrajectory {
        TaskTrajectory::from_array(std::array::from_fn(|i| self.center(i)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub alpha: f64,
}

impl BucketPose {
    pub fn new(x: f64, y: f64, z: f64, alpha: f64) -> Self {
        BucketPose { x, y, z, alpha }
    }

    fn lerp(&self, other: &BucketPose, f: f64) -> BucketPose {
        BucketPose {
            x: self.x + (other.x - self.x) * f,
            y: self.y + (other.y - self.y) * f,
            z: self.z + (other.z - self.z) * f,
            alpha: self.alpha + (other.alpha - self.alpha) * f,
        }
    }

    fn distance(&self, other: &BucketPose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Attack,
    Penetrate,
    Drag,
    Close,
    Lift,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Attack, Phase::Penetrate, Phase::Drag, Phase::Close, Phase::Lift];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointConfig {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
}

impl JointConfig {
    pub fn to_array(&self) -> [f64; 4] {
        [self.q1, self.q2, self.q3, self.q4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcavatorModel {
    /// Swing axis position in the tray frame; `z` is the mount height the
    /// boom pivot height is measured from.
    pub base_position: Point3,
    pub base_height: f64,
    pub boom_length: f64,
    pub stick_length: f64,
    pub bucket_length: f64,
    pub joint_limits: [(f64, f64); 4],
    pub lift_height: f64,
    /// cm³
    pub bucket_volume: f64,
    pub bucket_width: f64,
    pub bucket_mouth_length: f64,
    pub bucket_depth: f64,
    pub home: BucketPose,
    pub interp_step: f64,
    pub max_joint_step: f64,
}

impl Default for ExcavatorModel {
    fn default() -> Self {
        let base_position = Point3::new(-0.5, 0.109, 0.0);
        ExcavatorModel {
            base_position,
            base_height: 0.25,
            boom_length: 0.45,
            stick_length: 0.35,
            bucket_length: 0.12,
            joint_limits: [(-PI, PI), (-FRAC_PI_2, FRAC_PI_2), (-2.8, 0.0), (-3.3, 1.5)],
            lift_height: 0.25,
            bucket_volume: 450.0,
            bucket_width: 0.1,
            bucket_mouth_length: 0.075,
            bucket_depth: 0.06,
            home: BucketPose::new(base_position.x + 0.4, base_position.y, 0.2, -FRAC_PI_2),
            interp_step: 0.01,
            max_joint_step: 0.2,
        }
    }
}

impl ExcavatorModel {
    pub fn check(&self) -> Result<()> {
        let lengths = [
            self.boom_length,
            self.stick_length,
            self.bucket_length,
            self.bucket_width,
            self.bucket_mouth_length,
            self.bucket_depth,
            self.interp_step,
            self.max_joint_step,
        ];
        if lengths.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("excavator lengths must be positive".into()));
        }
        let box_volume = self.bucket_width * self.bucket_mouth_length * self.bucket_depth * 1e6;
        if (box_volume - self.bucket_volume).abs() > 0.01 * self.bucket_volume {
            return Err(Error::Config(format!(
                "bucket dimensions give {box_volume:.1} cm³, bucket volume is {:.1} cm³",
                self.bucket_volume
            )));
        }
        if self.joint_limits.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("joint limits must satisfy min < max".into()));
        }
        Ok(())
    }

    pub fn shoulder_z(&self) -> f64 {
        self.base_position.z + self.base_height
    }

    fn within_limits(&self, q: &JointConfig) -> bool {
        q.to_array()
            .iter()
            .zip(&self.joint_limits)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// Key poses P0..P5 of a trajectory over the surface `hm`.
pub fn expand_phases(t: &TaskTrajectory, hm: &HeightMap, m: &ExcavatorModel) -> Result<[BucketPose; 6]> {
    let z0 = hm.surface_height(t.x, t.y)?;
    let to_base = (m.base_position.x - t.x, m.base_position.y - t.y);
    let distance = to_base.0.hypot(to_base.1);
    if t.l >= distance {
        return Err(Error::DegenerateDrag { length: t.l, distance });
    }
    let (ux, uy) = (to_base.0 / distance, to_base.1 / distance);
    let (xe, ye) = (t.x + t.l * ux, t.y + t.l * uy);
    let bottom = z0 - t.d;
    Ok([
        m.home,
        BucketPose::new(t.x, t.y, z0, t.alpha),
        BucketPose::new(t.x, t.y, bottom, t.alpha),
        BucketPose::new(xe, ye, bottom, t.alpha),
        BucketPose::new(xe, ye, bottom, t.beta),
        BucketPose::new(xe, ye, m.lift_height, t.beta),
    ])
}

pub fn fk(m: &ExcavatorModel, q: &JointConfig) -> BucketPose {
    let t1 = q.q2;
    let t2 = q.q2 + q.q3;
    let t3 = q.q2 + q.q3 + q.q4;
    let r = m.boom_length * t1.cos() + m.stick_length * t2.cos() + m.bucket_length * t3.cos();
    let zp = m.boom_length * t1.sin() + m.stick_length * t2.sin() + m.bucket_length * t3.sin();
    let (s1, c1) = q.q1.sin_cos();
    BucketPose {
        x: m.base_position.x + r * c1,
        y: m.base_position.y + r * s1,
        z: m.shoulder_z() + zp,
        alpha: t3,
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

fn ik_in_phase(m: &ExcavatorModel, p: &BucketPose, phase: Option<Phase>) -> Result<JointConfig> {
    let dx = p.x - m.base_position.x;
    let dy = p.y - m.base_position.y;
    let r = dx.hypot(dy);
    let q1 = if r > 0.0 { dy.atan2(dx) } else { 0.0 };
    let (sa, ca) = p.alpha.sin_cos();
    let wr = r - m.bucket_length * ca;
    let wz = p.z - m.shoulder_z() - m.bucket_length * sa;
    let (a, b) = (m.boom_length, m.stick_length);
    let dist = wr.hypot(wz);
    let (min, max) = ((a - b).abs(), a + b);
    const SLACK: f64 = 1e-12;
    if dist > max + SLACK || dist < min - SLACK {
        return Err(Error::Unreachable {
            phase,
            distance: dist,
            min,
            max,
        });
    }
    let c3 = ((wr * wr + wz * wz - a * a - b * b) / (2.0 * a * b)).clamp(-1.0, 1.0);
    let elbow = c3.acos();
    // elbow-up first: the stick folds down below the boom
    for q3 in [-elbow, elbow] {
        let q2 = wrap_angle(wz.atan2(wr) - (b * q3.sin()).atan2(a + b * q3.cos()));
        let q4 = p.alpha - q2 - q3;
        let q = JointConfig { q1, q2, q3, q4 };
        if m.within_limits(&q) {
            return Ok(q);
        }
    }
    Err(Error::JointLimit { phase })
}

pub fn ik(m: &ExcavatorModel, p: &BucketPose) -> Result<JointConfig> {
    ik_in_phase(m, p, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub waypoints: Vec<JointConfig>,
    /// Index of the last waypoint of each segment.
    pub phase_boundaries: Vec<usize>,
}

/// Interpolation length of a segment: translation distance or the arc the
/// bucket tip sweeps when rotating, whichever is larger.
pub fn segment_length(a: &BucketPose, b: &BucketPose, m: &ExcavatorModel) -> f64 {
    a.distance(b).max(m.bucket_length * (b.alpha - a.alpha).abs())
}

pub fn segment_waypoints(length: f64, step: f64) -> usize {
    ((length / step) - 1e-9).ceil().max(0.0) as usize + 1
}

pub fn interpolate_trajectory(poses: &[BucketPose], m: &ExcavatorModel, step: f64) -> Result<JointTrajectory> {
    let Some(first) = poses.first() else {
        return Ok(JointTrajectory {
            waypoints: vec![],
            phase_boundaries: vec![],
        });
    };
    let phase_of = |s: usize| Phase::ALL[s.min(Phase::ALL.len() - 1)];
    let mut waypoints = vec![ik_in_phase(m, first, Some(Phase::Attack))?];
    let mut phase_boundaries = Vec::with_capacity(poses.len().saturating_sub(1));
    for (s, pair) in poses.windows(2).enumerate() {
        let phase = phase_of(s);
        let n = segment_waypoints(segment_length(&pair[0], &pair[1], m), step);
        for k in 1..n {
            let pose = pair[0].lerp(&pair[1], k as f64 / (n - 1) as f64);
            let q = ik_in_phase(m, &pose, Some(phase))?;
            let prev = waypoints.last().unwrap();
            let jump = [
                wrap_angle(q.q1 - prev.q1).abs(),
                (q.q2 - prev.q2).abs(),
                (q.q3 - prev.q3).abs(),
                (q.q4 - prev.q4).abs(),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            if jump > m.max_joint_step {
                return Err(Error::JointJump { phase, step: jump });
            }
            waypoints.push(q);
        }
        phase_boundaries.push(waypoints.len() - 1);
    }
    Ok(JointTrajectory {
        waypoints,
        phase_boundaries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    MalformedParameters,
    AttackOutOfRange,
    OutsideHeightMap,
    DegenerateDrag,
    Unreachable(Phase),
    JointLimit(Phase),
    JointJump(Phase),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    pub ik_valid: bool,
    pub attack_in_range: bool,
    pub reasons: Vec<InvalidReason>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.ik_valid && self.attack_in_range
    }
}

pub fn validate(
    t: &TaskTrajectory,
    hm: &HeightMap,
    m: &ExcavatorModel,
    tray: &CuboidRegion,
    margin: f64,
) -> ValidityReport {
    let mut reasons = Vec::new();
    if !t.is_well_formed() {
        reasons.push(InvalidReason::MalformedParameters);
        return ValidityReport {
            ik_valid: false,
            attack_in_range: false,
            reasons,
        };
    }
    let attack_in_range = tray.footprint_contains(t.x, t.y, margin);
    if !attack_in_range {
        reasons.push(InvalidReason::AttackOutOfRange);
    }
    let ik_result = expand_phases(t, hm, m).and_then(|poses| interpolate_trajectory(&poses, m, m.interp_step));
    let ik_valid = match ik_result {
        Ok(_) => true,
        Err(e) => {
            reasons.push(match e {
                Error::OutOfRange { .. } => InvalidReason::OutsideHeightMap,
                Error::DegenerateDrag { .. } => InvalidReason::DegenerateDrag,
                Error::Unreachable { phase, .. } => InvalidReason::Unreachable(phase.unwrap_or(Phase::Attack)),
                Error::JointLimit { phase } => InvalidReason::JointLimit(phase.unwrap_or(Phase::Attack)),
                Error::JointJump { phase, .. } => InvalidReason::JointJump(phase),
                _ => InvalidReason::MalformedParameters,
            });
            false
        }
    };
    ValidityReport {
        ik_valid,
        attack_in_range,
        reasons,
    }
}

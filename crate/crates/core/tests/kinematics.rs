use std::f64::consts::FRAC_PI_2;

use approx::assert_abs_diff_eq;
use excavation::geometry::{CuboidRegion, HeightMap, HeightMapSpec};
use excavation::kinematics::*;
use excavation::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat_map(z: f64) -> HeightMap {
    HeightMap::flat(HeightMapSpec::covering(&CuboidRegion::default(), 0.01, -0.15), z)
}

/// Random in-limit elbow-up configuration whose planar reach is positive.
fn random_config(m: &ExcavatorModel, rng: &mut ChaCha8Rng) -> JointConfig {
    loop {
        let mut q = [0.0; 4];
        for (v, (lo, hi)) in q.iter_mut().zip(&m.joint_limits) {
            *v = rng.random_range(*lo..*hi);
        }
        q[0] = rng.random_range(-3.1..3.1);
        let cfg = JointConfig {
            q1: q[0],
            q2: q[1],
            q3: q[2],
            q4: q[3],
        };
        let wr = m.boom_length * cfg.q2.cos() + m.stick_length * (cfg.q2 + cfg.q3).cos();
        let r = wr + m.bucket_length * (cfg.q2 + cfg.q3 + cfg.q4).cos();
        if wr > 0.05 && r > 0.05 && cfg.q3 < -1e-3 {
            return cfg;
        }
    }
}

#[test]
fn zero_configuration() {
    let m = ExcavatorModel::default();
    let p = fk(
        &m,
        &JointConfig {
            q1: 0.0,
            q2: 0.0,
            q3: 0.0,
            q4: 0.0,
        },
    );
    assert_abs_diff_eq!(p.x, -0.5 + 0.92, epsilon = 1e-12);
    assert_abs_diff_eq!(p.y, 0.109, epsilon = 1e-12);
    assert_abs_diff_eq!(p.z, 0.25, epsilon = 1e-12);
    assert_eq!(p.alpha, 0.0);
    let q = fk(
        &m,
        &JointConfig {
            q1: FRAC_PI_2,
            q2: 0.0,
            q3: 0.0,
            q4: 0.0,
        },
    );
    assert_abs_diff_eq!(q.x, -0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(q.y, 0.109 + 0.92, epsilon = 1e-12);
}

#[test]
fn fk_ik_round_trip() {
    let m = ExcavatorModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let q = random_config(&m, &mut rng);
        let p = fk(&m, &q);
        let back = ik(&m, &p).unwrap();
        let p2 = fk(&m, &back);
        let err = ((p.x - p2.x).powi(2) + (p.y - p2.y).powi(2) + (p.z - p2.z).powi(2)).sqrt();
        assert!(err < 1e-9, "{err}");
        assert!((back.q2 + back.q3 + back.q4 - p.alpha).abs() < 1e-9);
        for (a, b) in q.to_array().iter().zip(back.to_array()) {
            assert!((a - b).abs() < 1e-6, "{q:?} vs {back:?}");
        }
    }
}

#[test]
fn full_extension_and_beyond() {
    let m = ExcavatorModel::default();
    // wrist exactly boom + stick away, level with the shoulder
    let reach = m.boom_length + m.stick_length;
    let p = BucketPose::new(
        m.base_position.x + reach + m.bucket_length,
        m.base_position.y,
        m.shoulder_z(),
        0.0,
    );
    let q = ik(&m, &p).unwrap();
    assert!(q.q3.abs() < 1e-7);
    let far = BucketPose::new(p.x + 0.01, p.y, p.z, 0.0);
    assert!(matches!(ik(&m, &far), Err(Error::Unreachable { .. })));
}

#[test]
fn phase_expansion_examples() {
    let m = ExcavatorModel::default();
    let hm = flat_map(0.0);
    let t = TaskTrajectory::new(0.1, 0.0, -FRAC_PI_2, 0.1, 0.1, -2.27);
    let p = expand_phases(&t, &hm, &m).unwrap();
    // independent vector arithmetic
    let (vx, vy) = (-0.6f64, 0.109f64);
    let n = (vx * vx + vy * vy).sqrt();
    let (ex, ey) = (0.1 + 0.1 * vx / n, 0.1 * vy / n);
    assert_abs_diff_eq!(p[3].x, ex, epsilon = 1e-12);
    assert_abs_diff_eq!(p[3].y, ey, epsilon = 1e-12);
    assert_abs_diff_eq!(p[3].x, 0.00161, epsilon = 1e-5);
    assert_abs_diff_eq!(p[3].y, 0.01787, epsilon = 1e-5);
    assert_eq!(p[3].z, -0.1);
    assert_eq!(p[4].alpha, -2.27);
    assert_eq!(p[5].z, m.lift_height);

    let no_drag = expand_phases(&TaskTrajectory { l: 0.0, ..t }, &hm, &m).unwrap();
    assert_eq!((no_drag[3].x, no_drag[3].y), (no_drag[2].x, no_drag[2].y));
    let no_depth = expand_phases(&TaskTrajectory { d: 0.0, ..t }, &hm, &m).unwrap();
    assert_eq!(no_depth[2], no_depth[1]);
}

#[test]
fn phase_expansion_errors() {
    let m = ExcavatorModel::default();
    let hm = flat_map(0.0);
    let outside = TaskTrajectory::new(0.5, 0.0, -1.5, 0.1, 0.1, -2.5);
    assert!(matches!(
        expand_phases(&outside, &hm, &m),
        Err(Error::OutOfRange { .. })
    ));
    let long = TaskTrajectory::new(0.0, 0.109, -1.5, 0.1, 0.5, -2.5);
    assert!(matches!(
        expand_phases(&long, &hm, &m),
        Err(Error::DegenerateDrag { .. })
    ));
}

#[test]
fn interpolation_counts() {
    let m = ExcavatorModel::default();
    let a = BucketPose::new(0.0, 0.0, -0.05, -1.5);
    let single = interpolate_trajectory(&[a, a], &m, 0.01).unwrap();
    assert_eq!(single.waypoints.len(), 1);
    let b = BucketPose::new(-0.1, 0.0, -0.05, -1.5);
    let line = interpolate_trajectory(&[a, b], &m, 0.01).unwrap();
    assert_eq!(line.waypoints.len(), 11);
    for w in &line.waypoints {
        let p = fk(&m, w);
        assert!((p.y - 0.0).abs() < 1e-9 && (p.z + 0.05).abs() < 1e-9);
        assert!(p.x <= 1e-9 && p.x >= -0.1 - 1e-9);
    }
}

#[test]
fn valid_trajectory_waypoints_round_trip() {
    let m = ExcavatorModel::default();
    let hm = flat_map(-0.05);
    let t = TaskTrajectory::new(0.0, 0.0, -1.6, 0.05, 0.1, -2.5);
    let poses = expand_phases(&t, &hm, &m).unwrap();
    let traj = interpolate_trajectory(&poses, &m, 0.01).unwrap();
    assert_eq!(traj.phase_boundaries.len(), 5);
    for (s, pair) in poses.windows(2).enumerate() {
        let start = if s == 0 { 0 } else { traj.phase_boundaries[s - 1] };
        let n = segment_waypoints(segment_length(&pair[0], &pair[1], &m), 0.01);
        assert_eq!(traj.phase_boundaries[s] - start, n - 1);
    }
    for q in &traj.waypoints {
        let p = fk(&m, q);
        let back = fk(&m, &ik(&m, &p).unwrap());
        assert!((p.x - back.x).abs() + (p.y - back.y).abs() + (p.z - back.z).abs() < 1e-9);
    }
}

#[test]
fn validity_flags() {
    let m = ExcavatorModel::default();
    let hm = flat_map(-0.05);
    let tray = CuboidRegion::default();
    let good = TaskTrajectory::new(0.0, 0.0, -1.6, 0.05, 0.1, -2.5);
    let r = validate(&good, &hm, &m, &tray, 0.02);
    assert!(r.is_valid(), "{r:?}");
    let out = TaskTrajectory { x: 0.185, ..good };
    assert!(!validate(&out, &hm, &m, &tray, 0.02).attack_in_range);
    let deep = TaskTrajectory { d: 1.0, ..good };
    let r = validate(&deep, &hm, &m, &tray, 0.02);
    assert!(!r.ik_valid);
    assert!(matches!(r.reasons[0], InvalidReason::Unreachable(Phase::Penetrate)));
}

proptest! {
    #[test]
    fn alpha_decomposes_into_joint_sum(seed in any::<u64>()) {
        let m = ExcavatorModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_config(&m, &mut rng);
        let p = fk(&m, &q);
        let back = ik(&m, &p).unwrap();
        prop_assert!((back.q2 + back.q3 + back.q4 - p.alpha).abs() < 1e-9);
    }

    #[test]
    fn drag_heads_to_base(x in -0.17f64..0.17, y in -0.18f64..0.18, l in 0.01f64..0.3, d in 0.0f64..0.2) {
        let m = ExcavatorModel::default();
        let hm = flat_map(-0.1);
        let t = TaskTrajectory::new(x, y, -1.5, d, l, -2.5);
        let p = expand_phases(&t, &hm, &m).unwrap();
        prop_assert_eq!(p[2].z, p[1].z - d);
        prop_assert_eq!(p[3].z, p[2].z);
        prop_assert_eq!(p[4].z, p[2].z);
        prop_assert_eq!(p[5].z, m.lift_height);
        let (dx, dy) = (p[3].x - p[2].x, p[3].y - p[2].y);
        let (ax, ay) = (x - m.base_position.x, y - m.base_position.y);
        let cross = dx * ay - dy * ax;
        let dot = dx * ax + dy * ay;
        prop_assert!(cross.abs() < 1e-9);
        prop_assert!(dot < 0.0);
    }

    #[test]
    fn trajectory_bytes_round_trip(a in proptest::array::uniform6(-10.0f64..10.0)) {
        let t = TaskTrajectory::from_array(a);
        prop_assert_eq!(TaskTrajectory::from_le_bytes(&t.to_le_bytes()), t);
    }
}

use approx::assert_abs_diff_eq;
use excavation::geometry::*;
use excavation::Error;
use nalgebra::{Matrix3, Vector3};
use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-3.0..3.0);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half / 2.0..half / 2.0),
            )
        })
        .collect();
    PointCloud::new(pts, Frame::Tray)
}

#[test]
fn identity_transform_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = random_cloud(&mut rng, 100, 0.3);
    let out = transform_cloud(&cloud, &RigidTransform::identity(), Frame::Tray).unwrap();
    assert_eq!(out, cloud);
}

#[test]
fn quarter_turn_about_z() {
    let t = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros());
    let cloud = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)], Frame::Tray);
    let p = transform_cloud(&cloud, &t, Frame::Tray).unwrap().points[0];
    assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p.y, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p.z, 0.0, epsilon = 1e-12);
}

#[test]
fn transform_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = random_cloud(&mut rng, 200, 1.0);
    for _ in 0..20 {
        let t = RigidTransform::new(
            random_rotation(&mut rng),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        )
        .unwrap();
        let fwd = transform_cloud(&cloud, &t, Frame::Camera).unwrap();
        let back = transform_cloud(&fwd, &t.inverse(), Frame::Tray).unwrap();
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert!((a - b).abs().max() < 1e-9);
        }
    }
}

#[test]
fn non_orthonormal_rotation_rejected() {
    let mut r = Matrix3::identity();
    r[(0, 0)] = 1.1;
    assert!(matches!(
        RigidTransform::new(r, Vector3::zeros()),
        Err(Error::InvalidTransform(_))
    ));
    let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    assert!(RigidTransform::new(reflection, Vector3::zeros()).is_err());
}

#[test]
fn crop_closed_bounds() {
    let region = CuboidRegion::default();
    let face = Point3::new(0.19, 0.0, 0.0);
    let outside = Point3::new(0.19 + 1e-12, 0.0, 0.0);
    let cloud = PointCloud::new(vec![Point3::origin(), face, outside], Frame::Tray);
    let out = crop_cuboid(&cloud, &region).unwrap();
    assert_eq!(out.points, vec![Point3::origin(), face]);
}

#[test]
fn crop_matches_membership_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let region = CuboidRegion::new(Point3::new(0.01, -0.02, 0.03), Vector3::new(0.1, 0.15, 0.05)).unwrap();
    let pts: Vec<Point3> = (0..1000)
        .map(|_| {
            Point3::new(
                0.01 + rng.random_range(-0.2..0.2),
                -0.02 + rng.random_range(-0.3..0.3),
                0.03 + rng.random_range(-0.1..0.1),
            )
        })
        .collect();
    let expected: Vec<Point3> = pts
        .iter()
        .filter(|p| {
            p.x >= 0.01 - 0.1
                && p.x <= 0.01 + 0.1
                && p.y >= -0.02 - 0.15
                && p.y <= -0.02 + 0.15
                && p.z >= 0.03 - 0.05
                && p.z <= 0.03 + 0.05
        })
        .copied()
        .collect();
    let out = crop_cuboid(&PointCloud::new(pts, Frame::Tray), &region).unwrap();
    assert_eq!(out.points, expected);
}

#[test]
fn camera_frame_rejected() {
    let cloud = PointCloud::new(vec![Point3::origin()], Frame::Camera);
    assert!(matches!(
        crop_cuboid(&cloud, &CuboidRegion::default()),
        Err(Error::FrameMismatch { .. })
    ));
    assert!(voxelize(&cloud, &GridSpec::default()).is_err());
}

#[test]
fn origin_lands_in_center_cell() {
    let spec = GridSpec::default();
    let grid = voxelize(&PointCloud::new(vec![Point3::origin()], Frame::Tray), &spec).unwrap();
    assert!(grid.get(32, 32, 16));
    assert_eq!(grid.occupied_count(), 1);
    assert_eq!(grid.packed().len(), 16384);
}

#[test]
fn half_open_grid_corners() {
    let spec = GridSpec::default();
    let max = Point3::new(0.32, 0.32, 0.16);
    let grid = voxelize(&PointCloud::new(vec![spec.origin, max], Frame::Tray), &spec).unwrap();
    assert!(grid.get(0, 0, 0));
    assert_eq!(grid.occupied_count(), 1);
}

#[test]
fn invalid_resolution() {
    let spec = GridSpec {
        resolution: 0.0,
        ..GridSpec::default()
    };
    let cloud = PointCloud::new(vec![], Frame::Tray);
    assert!(matches!(voxelize(&cloud, &spec), Err(Error::InvalidSpec(_))));
    let mut hs = HeightMapSpec::covering(&CuboidRegion::default(), 0.01, -0.15);
    hs.cell_size = -1.0;
    assert!(build_height_map(&cloud, &hs).is_err());
}

#[test]
fn voxelize_matches_binning_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = GridSpec::default();
    let cloud = random_cloud(&mut rng, 500, 0.4);
    let grid = voxelize(&cloud, &spec).unwrap();
    let mut expected = vec![false; spec.cell_count()];
    for p in &cloud.points {
        let fx = ((p.x + 0.32) / 0.01).floor();
        let fy = ((p.y + 0.32) / 0.01).floor();
        let fz = ((p.z + 0.16) / 0.01).floor();
        if (0.0..64.0).contains(&fx) && (0.0..64.0).contains(&fy) && (0.0..32.0).contains(&fz) {
            expected[fx as usize + 64 * (fy as usize + 64 * fz as usize)] = true;
        }
    }
    for (idx, e) in expected.iter().enumerate() {
        assert_eq!(grid.get_flat(idx), *e, "cell {idx}");
    }
    let listed: Vec<usize> = grid.occupied().collect();
    let want: Vec<usize> = (0..expected.len()).filter(|&i| expected[i]).collect();
    assert_eq!(listed, want);
}

#[test]
fn height_map_rules() {
    let spec = HeightMapSpec::covering(&CuboidRegion::default(), 0.01, -0.15);
    assert_eq!(spec.dims, [38, 40]);
    let empty = build_height_map(&PointCloud::new(vec![], Frame::Tray), &spec).unwrap();
    assert!(empty.heights.iter().all(|&h| h == -0.15));
    let two = PointCloud::new(
        vec![Point3::new(0.001, 0.001, 0.03), Point3::new(0.002, 0.003, 0.07)],
        Frame::Tray,
    );
    let hm = build_height_map(&two, &spec).unwrap();
    assert_eq!(hm.surface_height(0.0015, 0.002).unwrap(), 0.07);
}

#[test]
fn height_map_matches_max_binning_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = HeightMapSpec::covering(&CuboidRegion::default(), 0.01, -0.15);
    let cloud = random_cloud(&mut rng, 3000, 0.25);
    let hm = build_height_map(&cloud, &spec).unwrap();
    for j in 0..40 {
        for i in 0..38 {
            let want = cloud
                .points
                .iter()
                .filter(|p| ((p.x + 0.19f64) / 0.01).floor() == i as f64 && ((p.y + 0.2f64) / 0.01).floor() == j as f64)
                .map(|p| p.z)
                .fold(-0.15, f64::max);
            assert_eq!(hm.height(i, j), want);
        }
    }
    for _ in 0..100 {
        let x: f64 = rng.random_range(-0.19..0.19);
        let y: f64 = rng.random_range(-0.2..0.2);
        let i = ((x + 0.19) / 0.01).floor() as usize;
        let j = ((y + 0.2) / 0.01).floor() as usize;
        assert_eq!(hm.surface_height(x, y).unwrap(), hm.heights[i + 38 * j]);
    }
}

#[test]
fn surface_height_lookup_conventions() {
    let spec = HeightMapSpec::covering(&CuboidRegion::default(), 0.01, -0.15);
    let mut hm = HeightMap::flat(spec, -0.15);
    hm.heights[3 + 38 * 5] = 0.02;
    let (cx, cy) = hm.cell_center(3, 5);
    assert_eq!(hm.surface_height(cx, cy).unwrap(), 0.02);
    // shared edge between cells 2 and 3 resolves by floor binning
    let edge = spec.origin[0] + 3.0 * spec.cell_size;
    assert_eq!(
        hm.cell_of(edge, cy).unwrap().0,
        ((edge - spec.origin[0]) / 0.01).floor() as usize
    );
    assert!(matches!(hm.surface_height(0.5, 0.0), Err(Error::OutOfRange { .. })));
}

#[test]
fn voxel_column_matches_height_map_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = GridSpec::default();
    let hm_spec = HeightMapSpec {
        dims: [64, 64],
        cell_size: grid.resolution,
        origin: [grid.origin.x, grid.origin.y],
        floor_z: -0.16,
    };
    let hm = HeightMap::flat(hm_spec, -0.16);
    for p in random_cloud(&mut rng, 500, 0.3).points {
        let [i, j, _] = grid.cell_of(&p).unwrap();
        assert_eq!(hm.cell_of(p.x, p.y), Some((i, j)));
    }
}

#[test]
fn crop_then_voxelize_equals_voxelize_when_cuboid_contains_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = GridSpec::default();
    let big = CuboidRegion::new(Point3::origin(), Vector3::new(0.4, 0.4, 0.2)).unwrap();
    let cloud = random_cloud(&mut rng, 800, 0.5);
    let a = voxelize(&crop_cuboid(&cloud, &big).unwrap(), &spec).unwrap();
    let b = voxelize(&cloud, &spec).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn duplicate_points_never_change_occupancy(seed in any::<u64>(), pick in 0usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::default();
        let mut cloud = random_cloud(&mut rng, 200, 0.35);
        let before = voxelize(&cloud, &spec).unwrap();
        cloud.points.push(cloud.points[pick]);
        prop_assert_eq!(voxelize(&cloud, &spec).unwrap(), before);
    }

    #[test]
    fn extrinsics_invariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::default();
        let cam = random_cloud(&mut rng, 300, 0.3);
        let tray_from_cam = RigidTransform::new(random_rotation(&mut rng), Vector3::new(0.1, -0.2, 0.3)).unwrap();
        let e = RigidTransform::new(random_rotation(&mut rng), Vector3::new(rng.random(), rng.random(), rng.random())).unwrap();
        let cam = PointCloud::new(cam.points, Frame::Camera);
        let direct = voxelize(&transform_cloud(&cam, &tray_from_cam, Frame::Tray).unwrap(), &spec).unwrap();
        let moved = transform_cloud(&cam, &e.inverse(), Frame::Camera).unwrap();
        let via = voxelize(&transform_cloud(&moved, &tray_from_cam.compose(&e), Frame::Tray).unwrap(), &spec).unwrap();
        prop_assert_eq!(direct, via);
    }
}

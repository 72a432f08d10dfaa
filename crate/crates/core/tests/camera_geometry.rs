use approx::assert_abs_diff_eq;
use nalgebra::{Matrix3, Rotation3, Vector3};
use objdim::camera::{
    distort, project, remap_image, sample_bilinear, undistort, CameraIntrinsics, DistortionCoefficients,
    NormalizedPoint, RemapGrid, RigidTransform, WorldPoint, DEFAULT_UNDISTORT_MAX_ITER, DEFAULT_UNDISTORT_TOL,
};
use objdim::fixtures::webcam_rig;
use objdim::image::GrayImage;
use objdim::stereo::{
    build_rectification, decode_rmap, encode_rmap, essential_from_rt, fundamental_from_essential, triangulate,
    CameraModel, RectificationMaps, StereoRig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table_left_distortion() -> DistortionCoefficients {
    DistortionCoefficients::from_slice(&[0.0644, -0.2494, -0.6359, 6.9078e-4, -0.0011]).unwrap()
}

proptest! {
    #[test]
    fn undistort_inverts_distort(x in -0.35f64..0.35, y in -0.35f64..0.35) {
        let dist = table_left_distortion();
        let p = NormalizedPoint::new(x, y);
        let q = undistort(distort(p, &dist).unwrap(), &dist, DEFAULT_UNDISTORT_TOL, DEFAULT_UNDISTORT_MAX_ITER).unwrap();
        prop_assert!((q.x - x).abs() < 1e-9 && (q.y - y).abs() < 1e-9);
    }

    #[test]
    fn undistort_inverts_small_random_models(
        k in prop::array::uniform3(-0.05f64..0.05),
        t in prop::array::uniform2(-0.002f64..0.002),
        x in -0.5f64..0.5,
        y in -0.5f64..0.5,
    ) {
        let dist = DistortionCoefficients::from_slice(&[k[0], k[1], k[2], t[0], t[1]]).unwrap();
        let p = NormalizedPoint::new(x, y);
        let q = undistort(distort(p, &dist).unwrap(), &dist, DEFAULT_UNDISTORT_TOL, DEFAULT_UNDISTORT_MAX_ITER).unwrap();
        prop_assert!((q.x - x).abs() < 1e-9 && (q.y - y).abs() < 1e-9);
    }

    #[test]
    fn projection_is_scale_invariant(x in -500f64..500.0, y in -500f64..500.0, z in 100f64..5000.0, s in 0.1f64..10.0) {
        let intr = CameraIntrinsics::new(729.9077, 729.4782, 322.5457, 226.0965).unwrap();
        let zero = DistortionCoefficients::zero();
        let id = RigidTransform::identity();
        let a = project(WorldPoint::new(x, y, z), &id, &intr, &zero).unwrap();
        let b = project(WorldPoint::new(s * x, s * y, s * z), &id, &intr, &zero).unwrap();
        prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
    }

    #[test]
    fn rmap_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..rows * cols).map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)]).collect();
        let grid = RemapGrid::new(rows, cols, coords).unwrap();
        prop_assert_eq!(decode_rmap(&encode_rmap(&grid)).unwrap(), grid);
    }
}

#[test]
fn round_trip_over_thousand_points() {
    let dist = table_left_distortion();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut n = 0;
    while n < 1000 {
        let (x, y): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        if x.hypot(y) > 0.5 {
            continue;
        }
        let p = NormalizedPoint::new(x, y);
        let q = undistort(distort(p, &dist).unwrap(), &dist, DEFAULT_UNDISTORT_TOL, DEFAULT_UNDISTORT_MAX_ITER).unwrap();
        assert!((q.x - x).abs() < 1e-9 && (q.y - y).abs() < 1e-9, "{x} {y}");
        n += 1;
    }
}

#[test]
fn smooth_remap_matches_scalar_bilinear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = GrayImage::from_fn(40, 50, |_, _| rng.random()).unwrap();
    let grid = RemapGrid::from_fn(40, 50, |r, c| {
        let (r, c) = (r as f32, c as f32);
        [c + 1.3 * (r * 0.2).sin() + 0.37, r + 0.8 * (c * 0.15).cos() - 0.21]
    });
    let out = remap_image(&img, &grid);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(0..40), rng.random_range(0..50));
        let [x, y] = grid.get(r, c);
        let (x, y) = (x as f64, y as f64);
        // independent evaluation from the four neighbours
        let (x0, y0) = (x.floor(), y.floor());
        let px = |yy: f64, xx: f64| img.get_checked(yy as isize, xx as isize).map_or(0.0, |v| v as f64);
        let expect = (1.0 - (y - y0)) * ((1.0 - (x - x0)) * px(y0, x0) + (x - x0) * px(y0, x0 + 1.0))
            + (y - y0) * ((1.0 - (x - x0)) * px(y0 + 1.0, x0) + (x - x0) * px(y0 + 1.0, x0 + 1.0));
        assert_eq!(out.get(r, c), expect.round().clamp(0.0, 255.0) as u8);
        assert!((sample_bilinear(&img, x, y) - expect).abs() < 1e-9);
    }
}

fn printed_rt() -> (Matrix3<f64>, Vector3<f64>) {
    let rig = webcam_rig();
    (*rig.rotation(), *rig.translation())
}

#[test]
fn essential_matches_printed_matrix() {
    let printed: Matrix3<f64> = Matrix3::new(
        -0.0048, -0.4414, 1.0334, 0.1125, 0.1493, 93.1061, -1.2801, -93.1021, 0.1459,
    );
    let (r, t) = printed_rt();
    let e = essential_from_rt(&r, &t).unwrap();
    for i in 0..9 {
        assert!((e[i] - printed[i]).abs() <= 0.06, "entry {i}: {} vs {}", e[i], printed[i]);
    }
}

#[test]
fn fundamental_matches_printed_matrix() {
    let rig = webcam_rig();
    let f = rig.fundamental();
    let printed: Matrix3<f64> = Matrix3::new(0.0, 0.0, 0.0016, 0.0, 0.0, 0.1269, -0.0018, -0.1274, 0.6250);
    for i in 0..9 {
        if printed[i].abs() >= 0.01 {
            assert!(((f[i] - printed[i]) / printed[i]).abs() <= 0.10, "entry {i}: {} vs {}", f[i], printed[i]);
        }
    }
    let unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
    assert_eq!(fundamental_from_essential(&rig.essential(), &unit, &unit), rig.essential());
}

#[test]
fn essential_is_rank_two_for_exact_rotation() {
    let r = Rotation3::from_euler_angles(0.01, -0.02, 0.005).into_inner();
    let e = essential_from_rt(&r, &Vector3::new(-93.1, 1.28, 0.11)).unwrap();
    let sv = e.singular_values();
    let (max, min) = (sv.max(), sv.min());
    assert!(min <= 1e-6 * max);
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(f64::total_cmp);
    assert!((s[2] - s[1]).abs() <= 0.01 * s[2]);
    assert!(e.determinant().abs() <= 1e-6 * e.abs().max());
}

fn exact_rig(yaw_deg: f64, t: Vector3<f64>) -> StereoRig {
    let fixture = webcam_rig();
    let rot = Rotation3::from_euler_angles(0.003, yaw_deg.to_radians(), -0.002).into_inner();
    StereoRig::new(fixture.left, fixture.right, rot, t).unwrap()
}

#[test]
fn epipolar_constraints_hold() {
    let rig = exact_rig(1.0, Vector3::new(-93.1, 1.28, 0.11));
    let e = rig.essential();
    let f = rig.fundamental();
    let (kl, kr) = (rig.left.intrinsics.matrix(), rig.right.intrinsics.matrix());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let p = Vector3::new(rng.random_range(-400.0..400.0), rng.random_range(-300.0..300.0), rng.random_range(400.0..3000.0));
        let q = rig.left_to_right(&p);
        let (xl, xr) = (p / p.z, q / q.z);
        assert!((xr.transpose() * e * xl)[0].abs() < 1e-9);
        let (pl, pr) = (kl * xl, kr * xr);
        assert!((pr.transpose() * f * pl)[0].abs() < 1e-6);
    }
}

fn map_lookup(grid: &RemapGrid, u: f64, v: f64) -> Option<[f64; 2]> {
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    if c0 + 1 >= grid.cols() || r0 + 1 >= grid.rows() {
        return None;
    }
    let (a, b) = (u - c0 as f64, v - r0 as f64);
    let g = |r: usize, c: usize, k: usize| grid.get(r, c)[k] as f64;
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (1.0 - b) * ((1.0 - a) * g(r0, c0, k) + a * g(r0, c0 + 1, k))
            + b * ((1.0 - a) * g(r0 + 1, c0, k) + a * g(r0 + 1, c0 + 1, k));
    }
    Some(out)
}

/// Rectified rows agree, and the maps send each rectified pixel back to the
/// camera's own (distorted) projection.
fn check_rectification(rig: &StereoRig, maps: &RectificationMaps, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < 200 {
        let p = Vector3::new(rng.random_range(-300.0..300.0), rng.random_range(-200.0..200.0), rng.random_range(500.0..3000.0));
        let (Some(l), Some(r)) = (maps.project_rectified(rig, &p, false), maps.project_rectified(rig, &p, true)) else {
            continue;
        };
        let (Some(ml), Some(mr)) = (map_lookup(&maps.left_map, l[0], l[1]), map_lookup(&maps.right_map, r[0], r[1])) else {
            continue;
        };
        let zero = RigidTransform::identity();
        let ol = project(WorldPoint::from_vector(p), &zero, &rig.left.intrinsics, &rig.left.distortion).unwrap();
        let q = rig.left_to_right(&p);
        let or = project(WorldPoint::from_vector(q), &zero, &rig.right.intrinsics, &rig.right.distortion).unwrap();
        let inside = |u: f64, v: f64| (0.0..640.0).contains(&u) && (0.0..480.0).contains(&v);
        if !inside(ol.u, ol.v) || !inside(or.u, or.v) {
            continue;
        }
        assert!((ml[0] - ol.u).abs() < 0.05 && (ml[1] - ol.v).abs() < 0.05, "{ml:?} vs {ol:?}");
        assert!((mr[0] - or.u).abs() < 0.05 && (mr[1] - or.v).abs() < 0.05, "{mr:?} vs {or:?}");
        assert!((l[1] - r[1]).abs() <= 0.5, "dv {}", l[1] - r[1]);
        checked += 1;
    }
}

#[test]
fn webcam_rig_rectifies_rows() {
    let rig = webcam_rig();
    let maps = build_rectification(&rig, 480, 640).unwrap();
    assert_eq!(maps.baseline, rig.translation().norm());
    assert_eq!(maps.disparity_sign, -1.0);
    let finite = maps.left_map.coords().iter().filter(|c| c[0].is_finite()).count();
    assert!(finite > 480 * 640 * 9 / 10);
    check_rectification(&rig, &maps, 4);
}

#[test]
fn one_degree_yaw_rig_rectifies_rows() {
    let rig = exact_rig(1.0, Vector3::new(93.1, 0.0, 0.0));
    let maps = build_rectification(&rig, 480, 640).unwrap();
    assert_eq!(maps.disparity_sign, 1.0);
    check_rectification(&rig, &maps, 5);
}

#[test]
fn triangulation_round_trip_thousand_points() {
    let (f, t) = (730.0, 93.1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let p = Vector3::new(rng.random_range(-500.0..500.0), rng.random_range(-300.0..300.0), rng.random_range(300.0..5000.0));
        let (xl, yl) = (f * p.x / p.z, f * p.y / p.z);
        let d = f * t / p.z;
        let w = triangulate(d, xl, yl, f, t).unwrap();
        assert!(((w.z - p.z) / p.z).abs() < 1e-6);
        assert_abs_diff_eq!(w.x, p.x, epsilon = 1e-6);
        assert_abs_diff_eq!(w.y, p.y, epsilon = 1e-6);
    }
}

#[test]
fn calibration_text_round_trip() {
    let rig = webcam_rig();
    let again = StereoRig::from_calibration(&objdim::io::kv::Document::parse(objdim::fixtures::WEBCAM_RIG_CALIB).unwrap()).unwrap();
    assert_eq!(rig.essential(), again.essential());
    let _: CameraModel = rig.left;
}

#[test]
fn calibration_writer_round_trips() {
    let rig = webcam_rig();
    let text = rig.to_calibration();
    let back = StereoRig::from_calibration(&objdim::io::kv::Document::parse(&text).unwrap()).unwrap();
    assert_eq!(back.rotation(), rig.rotation());
    assert_eq!(back.translation(), rig.translation());
    assert_eq!(back.left, rig.left);
    assert_eq!(back.right, rig.right);
}

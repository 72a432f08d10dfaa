use objdim_web::{decode_capture, measure_cube_impl, scan_cube_impl};

#[test]
fn measure_cube_returns_images_of_the_demo_size() {
    let r = measure_cube_impl(700.0, 300.0, 85.0, true, 5, true).unwrap();
    assert_eq!((r.rows(), r.cols()), (240, 320));
    assert_eq!(r.left().len(), 240 * 320 * 4);
    assert_eq!(r.disparity().len(), 240 * 320 * 4);
    assert!(r.valid_fraction() > 0.3);
    assert!(r.height_cm() >= 0.0);
    assert!(r.threshold() > 0 && r.r_top() < 240);
}

#[test]
fn ground_plane_moves_the_threshold_row() {
    let with = measure_cube_impl(900.0, 250.0, 85.0, true, 5, true).unwrap();
    let without = measure_cube_impl(900.0, 250.0, 85.0, false, 5, true).unwrap();
    // near ground sets the maximum when present; without it the cube does
    assert!(without.r_top() < with.r_top(), "{} vs {}", without.r_top(), with.r_top());
    assert!(without.height_cm() > with.height_cm());
}

#[test]
fn bad_parameters_are_reported() {
    assert!(measure_cube_impl(50.0, 300.0, 85.0, true, 5, true).is_err());
    assert!(measure_cube_impl(700.0, 300.0, 85.0, true, 4, true).is_err());
    assert!(scan_cube_impl(700.0, 300.0, 3.0, 1.5, 5, 1).is_err());
    assert!(scan_cube_impl(700.0, 300.0, 3.0, 0.02, 0, 1).is_err());
}

#[test]
fn scan_finds_the_cube_face() {
    let r = scan_cube_impl(700.0, 300.0, 3.0, 0.02, 5, 7).unwrap();
    assert_eq!(r.plot().len(), r.size() * r.size() * 4);
    let map = objdim::fusion::EnvironmentMap::from_json(&r.json()).unwrap();
    assert_eq!(map.objects.len(), 1);
    assert!((map.objects[0].footprint.length - 300.0).abs() <= 20.0);
    assert!(map.objects[0].height_cm.is_none());
}

#[test]
fn capture_decoding_handles_garbage() {
    let r = decode_capture(&[0u8; 500]);
    let map = objdim::fusion::EnvironmentMap::from_json(&r.json()).unwrap();
    assert!(map.objects.is_empty() && map.points.is_empty());
}

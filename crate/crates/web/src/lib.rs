//! Browser bindings: render a cube scene and measure it, simulate a range
//! finder scan, and decode uploaded packet streams.
//!
//! The `*_impl` functions hold the logic and return plain `String` errors so
//! they can be tested natively; the exported wrappers only convert errors.

use nalgebra::Vector3;
use objdim::dimension::{self, HeightConfig};
use objdim::fusion::{self, CameraAxis, EnvironmentMap, MapMeta};
use objdim::image::GrayImage;
use objdim::lrf::{self, FootprintParams};
use objdim::morph::{self, StructuringElement};
use objdim::scene::{self, Cuboid, LrfNoise, SceneCamera, SceneSpec};
use objdim::sgm::{self, MatcherParams};
use wasm_bindgen::prelude::*;

/// Half-resolution copy of the default webcam so matching stays interactive.
fn demo_camera(height_mm: f64) -> SceneCamera {
    let full = SceneCamera::default();
    SceneCamera {
        rows: full.rows / 2,
        cols: full.cols / 2,
        focal: full.focal / 2.0,
        cx: (full.cx + 0.5) / 2.0 - 0.5,
        cy: (full.cy + 0.5) / 2.0 - 0.5,
        height: height_mm,
        ..full
    }
}

fn check(name: &str, value: f64, lo: f64, hi: f64) -> Result<(), String> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(format!("{name} must lie in [{lo}, {hi}], got {value}"))
    }
}

fn cube_scene(
    near_face_mm: f64,
    cube_mm: f64,
    camera_height_mm: f64,
    ground: bool,
    seed: u64,
) -> Result<SceneSpec, String> {
    check("distance", near_face_mm, 200.0, 3000.0)?;
    check("cube side", cube_mm, 50.0, 1000.0)?;
    check("camera height", camera_height_mm, 10.0, 1000.0)?;
    Ok(SceneSpec {
        objects: vec![Cuboid::on_ground(0.0, near_face_mm, Vector3::repeat(cube_mm), 3)],
        camera: demo_camera(camera_height_mm),
        ground,
        seed,
        ..SceneSpec::default()
    })
}

fn to_rgba(img: &GrayImage) -> Vec<u8> {
    img.data().iter().flat_map(|&v| [v, v, v, 255]).collect()
}

#[wasm_bindgen]
pub struct StereoResult {
    rows: usize,
    cols: usize,
    left: Vec<u8>,
    disparity: Vec<u8>,
    height_cm: f64,
    r_top: usize,
    threshold: u8,
    valid_fraction: f64,
}

#[wasm_bindgen]
impl StereoResult {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }
    /// Left view as RGBA.
    #[wasm_bindgen(getter)]
    pub fn left(&self) -> Vec<u8> {
        self.left.clone()
    }
    /// Dilated, normalized disparity as RGBA.
    #[wasm_bindgen(getter)]
    pub fn disparity(&self) -> Vec<u8> {
        self.disparity.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn height_cm(&self) -> f64 {
        self.height_cm
    }
    /// First image row at or above the intensity threshold.
    #[wasm_bindgen(getter)]
    pub fn r_top(&self) -> usize {
        self.r_top
    }
    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> u8 {
        self.threshold
    }
    #[wasm_bindgen(getter)]
    pub fn valid_fraction(&self) -> f64 {
        self.valid_fraction
    }
}

/// Renders the cube, matches, dilates and runs the max-intensity height
/// rule with constants derived from the demo camera. With the ground plane
/// on, nearby ground usually outranks the cube in disparity.
pub fn measure_cube_impl(
    near_face_mm: f64,
    cube_mm: f64,
    camera_height_mm: f64,
    ground: bool,
    block_size: usize,
    dilate: bool,
) -> Result<StereoResult, String> {
    let scene = cube_scene(near_face_mm, cube_mm, camera_height_mm, ground, 7)?;
    let c = scene.camera;
    let r = scene::render_stereo(&scene);
    let params = MatcherParams {
        num_disparities: sgm::suggest_num_disparities(c.focal, c.baseline, near_face_mm),
        ..MatcherParams::with_block_size(block_size)
    };
    let disp = sgm::compute_disparity(&r.left, &r.right, &params).map_err(|e| e.to_string())?;
    let mut img = sgm::normalize_to_image(&disp).image;
    if dilate {
        img = morph::dilate(&img, StructuringElement::default(), 1).map_err(|e| e.to_string())?;
    }
    let cfg = HeightConfig::from_geometry(c.focal, c.cy, c.rows, c.height, near_face_mm);
    let report = dimension::height_from_disparity(&img, &cfg, morph::DEFAULT_DELTA).map_err(|e| e.to_string())?;
    Ok(StereoResult {
        rows: c.rows,
        cols: c.cols,
        left: to_rgba(&r.left),
        disparity: to_rgba(&img),
        height_cm: report.height_cm,
        r_top: report.r_top,
        threshold: report.threshold.unwrap_or(0),
        valid_fraction: disp.valid_fraction(),
    })
}

#[wasm_bindgen]
pub fn measure_cube(
    near_face_mm: f64,
    cube_mm: f64,
    camera_height_mm: f64,
    ground: bool,
    block_size: usize,
    dilate: bool,
) -> Result<StereoResult, JsError> {
    measure_cube_impl(near_face_mm, cube_mm, camera_height_mm, ground, block_size, dilate).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct ScanResult {
    size: usize,
    plot: Vec<u8>,
    json: String,
}

#[wasm_bindgen]
impl ScanResult {
    /// Side of the square plot in pixels.
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }
    /// Map plot as RGBA, 10 mm per pixel, sensor at the centre.
    #[wasm_bindgen(getter)]
    pub fn plot(&self) -> Vec<u8> {
        self.plot.clone()
    }
    /// The map in its JSON export format.
    #[wasm_bindgen(getter)]
    pub fn json(&self) -> String {
        self.json.clone()
    }
}

fn plot_map(map: &EnvironmentMap, size: usize) -> Vec<u8> {
    let plot = fusion::render_plot(map, size, size);
    plot.rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Raycasts noisy revolutions, pushes them through the packet codec and
/// aggregates them into footprints.
pub fn scan_cube_impl(
    near_face_mm: f64,
    cube_mm: f64,
    stddev_mm: f64,
    outlier_prob: f64,
    realizations: usize,
    seed: u64,
) -> Result<ScanResult, String> {
    let scene = cube_scene(near_face_mm, cube_mm, 85.0, true, seed)?;
    check("noise", stddev_mm, 0.0, 100.0)?;
    check("outlier probability", outlier_prob, 0.0, 1.0)?;
    check("realizations", realizations as f64, 1.0, 20.0)?;
    let noise = LrfNoise {
        stddev_mm,
        outlier_prob,
        ..LrfNoise::default()
    };
    let bytes: Vec<u8> = scene::raycast_sweep(&scene, &noise, realizations, seed)
        .iter()
        .flat_map(|s| scene::encode_packets(s, scene.rpm))
        .collect();
    Ok(scan_bytes(&bytes, &scene.lrf.pose))
}

fn scan_bytes(bytes: &[u8], pose: &lrf::Pose2) -> ScanResult {
    let decoded = lrf::decode_stream(bytes);
    let sweeps: Vec<_> = lrf::split_sweeps(&decoded.packets).into_iter().map(lrf::assemble_sweep).collect();
    let min = lrf::DEFAULT_MIN_REALIZATIONS.min(sweeps.len()).max(1);
    let aggregated = lrf::aggregate_realizations(&sweeps, min).unwrap_or_else(|_| lrf::LrfSweep::empty());
    let gated = lrf::range_gate(&aggregated, lrf::DEFAULT_MAX_RANGE_MM);
    let points = lrf::to_points(&gated, pose);
    let footprints = lrf::extract_footprints(&points, &pose.position(), &FootprintParams::default());
    let fused = fusion::fuse(&footprints, None, &CameraAxis::default(), fusion::DEFAULT_ASSOCIATION_RADIUS_MM, "sweep0");
    let map = EnvironmentMap {
        objects: fused.objects,
        points,
        meta: MapMeta {
            sensor_poses: vec![[pose.x, pose.y, pose.theta]],
            timestamps: (0..sweeps.len() as u64).collect(),
            ..MapMeta::default()
        },
    };
    let size = fusion::DEFAULT_PLOT_SIZE;
    ScanResult {
        size,
        plot: plot_map(&map, size),
        json: map.to_json(),
    }
}

#[wasm_bindgen]
pub fn scan_cube(
    near_face_mm: f64,
    cube_mm: f64,
    stddev_mm: f64,
    outlier_prob: f64,
    realizations: usize,
    seed: u64,
) -> Result<ScanResult, JsError> {
    scan_cube_impl(near_face_mm, cube_mm, stddev_mm, outlier_prob, realizations, seed).map_err(|e| JsError::new(&e))
}

/// Maps a raw packet capture with the sensor at the origin facing +x.
#[wasm_bindgen]
pub fn decode_capture(bytes: &[u8]) -> ScanResult {
    scan_bytes(bytes, &lrf::Pose2::default())
}

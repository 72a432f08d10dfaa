//! Synthetic ground truth: ray-cast stereo pairs of textured boxes on a
//! ground plane with exact disparity, ray-cast LRF sweeps with noise, and
//! LRF packet streams.
//!
//! World frame: x right, y forward, z up, millimetres. The left camera sits
//! at (0, 0, height) looking along +y; the right camera is `baseline` further
//! along +x. The LRF scans a horizontal plane.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::CameraIntrinsics;
use crate::image::GrayImage;
use crate::io::kv::{Document, Section, Writer};
use crate::io::FormatError;
use crate::lrf::{self, LrfPacket, LrfSweep, Pose2, Reading, SLOTS};
use crate::par;
use crate::sgm::{DisparityMap, SUBPIXEL_SCALE};
use crate::stereo::{GeometryError, StereoRig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub center: Point3<f64>,
    pub size: Vector3<f64>,
    pub texture_seed: u64,
}

impl Cuboid {
    /// Box resting on the ground whose near face (smallest y) is at `near_y`.
    pub fn on_ground(x: f64, near_y: f64, size: Vector3<f64>, texture_seed: u64) -> Self {
        Self {
            center: Point3::new(x, near_y + 0.5 * size.y, 0.5 * size.z),
            size,
            texture_seed,
        }
    }

    fn min(&self) -> Point3<f64> {
        self.center - 0.5 * self.size
    }

    fn max(&self) -> Point3<f64> {
        self.center + 0.5 * self.size
    }
}

/// Ideal rectified pair with horizontal optical axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCamera {
    pub rows: usize,
    pub cols: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub height: f64,
}

impl Default for SceneCamera {
    fn default() -> Self {
        // means of the calibrated webcam pair
        Self {
            rows: 480,
            cols: 640,
            focal: 731.344_475,
            cx: 312.938_35,
            cy: 225.161_7,
            baseline: 93.1,
            height: 85.0,
        }
    }
}

impl SceneCamera {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(self.focal, self.focal, self.cx, self.cy).expect("positive focal")
    }

    pub fn rig(&self) -> Result<StereoRig, GeometryError> {
        StereoRig::ideal(self.intrinsics(), self.baseline)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glare {
    /// Pixel (col, row) in both images.
    pub center: [f64; 2],
    pub radius: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrfSetup {
    pub pose: Pose2,
    /// Height of the scan plane above the ground.
    pub height: f64,
}

impl Default for LrfSetup {
    fn default() -> Self {
        Self {
            pose: Pose2::default(),
            height: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrfNoise {
    pub stddev_mm: f64,
    pub outlier_prob: f64,
    pub outlier_range_mm: f64,
}

impl Default for LrfNoise {
    fn default() -> Self {
        Self {
            stddev_mm: 3.0,
            outlier_prob: 0.02,
            outlier_range_mm: 3000.0,
        }
    }
}

impl LrfNoise {
    pub fn none() -> Self {
        Self {
            stddev_mm: 0.0,
            outlier_prob: 0.0,
            outlier_range_mm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<Cuboid>,
    pub ground: bool,
    pub ground_seed: u64,
    /// Half side of a square room of walls centred on the origin.
    pub room_half_size: Option<f64>,
    pub camera: SceneCamera,
    pub lrf: LrfSetup,
    pub noise: LrfNoise,
    pub realizations: usize,
    pub rpm: f64,
    pub ambient: f64,
    pub glare: Option<Glare>,
    /// Flat albedo everywhere: the textureless failure case.
    pub unicolor: bool,
    pub seed: u64,
}

pub const DEFAULT_CUBE_SIDE: f64 = 300.0;
pub const DEFAULT_NEAR_FACE: f64 = 700.0;

impl Default for SceneSpec {
    /// 30 cm cube whose near face is 0.70 m in front of a camera 8.5 cm above the ground.
    fn default() -> Self {
        Self {
            objects: vec![Cuboid::on_ground(
                0.0,
                DEFAULT_NEAR_FACE,
                Vector3::repeat(DEFAULT_CUBE_SIDE),
                3,
            )],
            ground: true,
            ground_seed: 11,
            room_half_size: None,
            camera: SceneCamera::default(),
            lrf: LrfSetup::default(),
            noise: LrfNoise::default(),
            realizations: 5,
            rpm: 300.0,
            ambient: 0.35,
            glare: None,
            unicolor: false,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn empty() -> Self {
        Self {
            objects: Vec::new(),
            ..Self::default()
        }
    }

    pub fn from_document(doc: &Document) -> Result<Self, FormatError> {
        let mut spec = SceneSpec::default();
        let empty = Section::default();
        let s = doc.section("scene").unwrap_or(&empty);
        spec.seed = s.value_or("seed", spec.seed)?;
        spec.ground = s.flag_or("ground", spec.ground)?;
        spec.ground_seed = s.value_or("ground_seed", spec.ground_seed)?;
        spec.unicolor = s.flag_or("unicolor", spec.unicolor)?;
        spec.ambient = s.value_or("ambient", spec.ambient)?;
        if s.has("room_half_size") {
            spec.room_half_size = Some(s.value("room_half_size")?);
        }

        let c = doc.section("camera").unwrap_or(&empty);
        let d = spec.camera;
        spec.camera = SceneCamera {
            rows: c.value_or("rows", d.rows)?,
            cols: c.value_or("cols", d.cols)?,
            focal: c.value_or("focal", d.focal)?,
            cx: c.value_or("cx", d.cx)?,
            cy: c.value_or("cy", d.cy)?,
            baseline: c.value_or("baseline", d.baseline)?,
            height: c.value_or("height", d.height)?,
        };

        let objects: Vec<&Section> = doc.sections_named("object").collect();
        if !objects.is_empty() || s.flag_or("no_objects", false)? {
            spec.objects = objects
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    Ok(Cuboid {
                        center: Point3::from(o.array::<f64, 3>("center")?),
                        size: Vector3::from(o.array::<f64, 3>("size")?),
                        texture_seed: o.value_or("seed", 100 + i as u64)?,
                    })
                })
                .collect::<Result<_, FormatError>>()?;
        }
        for o in &spec.objects {
            if o.size.iter().any(|v| !(*v > 0.0)) {
                return Err(FormatError::Value {
                    key: "size".into(),
                    message: "object sizes must be positive".into(),
                });
            }
        }

        let l = doc.section("lrf").unwrap_or(&empty);
        // x_mm y_mm heading_deg
        let [x, y, heading] = if l.has("pose") { l.array("pose")? } else { [0.0; 3] };
        spec.lrf = LrfSetup {
            pose: Pose2::new(x, y, heading.to_radians()),
            height: l.value_or("height", spec.lrf.height)?,
        };
        spec.noise = LrfNoise {
            stddev_mm: l.value_or("stddev", spec.noise.stddev_mm)?,
            outlier_prob: l.value_or("outlier_prob", spec.noise.outlier_prob)?,
            outlier_range_mm: l.value_or("outlier_range", spec.noise.outlier_range_mm)?,
        };
        spec.realizations = l.value_or("realizations", spec.realizations)?;
        spec.rpm = l.value_or("rpm", spec.rpm)?;

        if let Some(g) = doc.section("glare") {
            spec.glare = Some(Glare {
                center: g.array("center")?,
                radius: g.value("radius")?,
                gain: g.value("gain")?,
            });
        }
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        Self::from_document(&Document::parse(text)?)
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::new();
        w.section("scene")
            .entry("seed", &[self.seed])
            .entry("ground", &[self.ground])
            .entry("ground_seed", &[self.ground_seed])
            .entry("unicolor", &[self.unicolor])
            .entry("ambient", &[self.ambient]);
        if let Some(h) = self.room_half_size {
            w.entry("room_half_size", &[h]);
        }
        if self.objects.is_empty() {
            w.entry("no_objects", &[true]);
        }
        let c = &self.camera;
        w.section("camera")
            .entry("rows", &[c.rows])
            .entry("cols", &[c.cols])
            .entry("focal", &[c.focal])
            .entry("cx", &[c.cx])
            .entry("cy", &[c.cy])
            .entry("baseline", &[c.baseline])
            .entry("height", &[c.height]);
        for o in &self.objects {
            w.section("object")
                .entry("center", o.center.coords.as_slice())
                .entry("size", o.size.as_slice())
                .entry("seed", &[o.texture_seed]);
        }
        let p = &self.lrf.pose;
        w.section("lrf")
            .entry("pose", &[p.x, p.y, p.theta.to_degrees()])
            .entry("height", &[self.lrf.height])
            .entry("stddev", &[self.noise.stddev_mm])
            .entry("outlier_prob", &[self.noise.outlier_prob])
            .entry("outlier_range", &[self.noise.outlier_range_mm])
            .entry("realizations", &[self.realizations])
            .entry("rpm", &[self.rpm]);
        if let Some(g) = &self.glare {
            w.section("glare")
                .entry("center", &g.center)
                .entry("radius", &[g.radius])
                .entry("gain", &[g.gain]);
        }
        w.finish()
    }
}

// Texture

fn hash(seed: u64, a: i64, b: i64, octave: u32) -> f64 {
    // splitmix64 finalizer over the combined lattice key
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (octave as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

const BASE_CELL_MM: f64 = 32.0;
const OCTAVES: u32 = 5;

/// Octave-summed value noise in [0, 1].
pub fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (mut sum, mut norm, mut amp, mut cell) = (0.0, 0.0, 1.0, BASE_CELL_MM);
    for o in 0..OCTAVES {
        let (x, y) = (u / cell, v / cell);
        let (ix, iy) = (x.floor(), y.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(x - ix), smooth(y - iy));
        let (ix, iy) = (ix as i64, iy as i64);
        let v00 = hash(seed, ix, iy, o);
        let v10 = hash(seed, ix + 1, iy, o);
        let v01 = hash(seed, ix, iy + 1, o);
        let v11 = hash(seed, ix + 1, iy + 1, o);
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        sum += amp * (top + (bottom - top) * fy);
        norm += amp;
        amp *= 0.6;
        cell *= 0.5;
    }
    sum / norm
}

// Ray casting

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: Vector3<f64>,
    point: Point3<f64>,
    seed: u64,
    /// Surface coordinates for the texture lookup.
    uv: (f64, f64),
}

fn hit_box(b: &Cuboid, o: &Point3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let (lo, hi) = (b.min(), b.max());
    let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, c) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        let (a, c) = if a > c { (c, a) } else { (a, c) };
        if a > t0 {
            t0 = a;
            axis = k;
        }
        t1 = t1.min(c);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    let point = o + d * t0;
    // the entry face's outward normal opposes the ray
    let mut normal = Vector3::zeros();
    normal[axis] = -d[axis].signum();
    let rel = point - b.min();
    let uv = match axis {
        0 => (rel.y, rel.z),
        1 => (rel.x, rel.z),
        _ => (rel.x, rel.y),
    };
    Some(Hit {
        t: t0,
        normal,
        point,
        seed: b.texture_seed,
        uv: (uv.0 + 1000.0 * axis as f64, uv.1),
    })
}

fn hit_plane(o: &Point3<f64>, d: &Vector3<f64>, axis: usize, value: f64, normal_sign: f64, seed: u64) -> Option<Hit> {
    if d[axis].abs() < 1e-15 {
        return None;
    }
    let t = (value - o[axis]) / d[axis];
    if t <= 1e-9 {
        return None;
    }
    let point = o + d * t;
    let mut normal = Vector3::zeros();
    normal[axis] = normal_sign;
    let uv = match axis {
        0 => (point.y, point.z),
        1 => (point.x, point.z),
        _ => (point.x, point.y),
    };
    Some(Hit { t, normal, point, seed, uv })
}

fn nearest(a: Option<Hit>, b: Option<Hit>) -> Option<Hit> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.t < x.t { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

impl SceneSpec {
    fn cast(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best = None;
        for b in &self.objects {
            best = nearest(best, hit_box(b, o, d));
        }
        if self.ground && d.z < 0.0 {
            best = nearest(best, hit_plane(o, d, 2, 0.0, 1.0, self.ground_seed));
        }
        if let Some(h) = self.room_half_size {
            for (axis, sign) in [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0)] {
                if d[axis] * sign > 0.0 {
                    let seed = self.ground_seed ^ (0x5A5A + axis as u64 * 2 + (sign > 0.0) as u64);
                    best = nearest(best, hit_plane(o, d, axis, sign * h, -sign, seed));
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> f64 {
        let albedo = if self.unicolor {
            0.6
        } else {
            let n = value_noise(hit.seed, hit.uv.0, hit.uv.1);
            (0.5 + 1.8 * (n - 0.5)).clamp(0.05, 1.0)
        };
        let light = Vector3::new(-0.35, -0.6, 0.72).normalize();
        let lambert = hit.normal.dot(&light).max(0.0);
        albedo * (self.ambient + (1.0 - self.ambient) * lambert)
    }
}

pub const SKY_INTENSITY: u8 = 180;

/// Left/right images with exact ground truth for the left view.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoRender {
    pub left: GrayImage,
    pub right: GrayImage,
    /// Fixed-point ground truth, INVALID where the ray escapes.
    pub gt_disparity: DisparityMap,
    /// Exact depth along the optical axis (mm), NaN where the ray escapes.
    pub depth: Vec<f64>,
    pub disparity: Vec<f64>,
}

impl StereoRender {
    pub fn depth_at(&self, row: usize, col: usize) -> Option<f64> {
        let z = self.depth[row * self.left.cols() + col];
        z.is_finite().then_some(z)
    }

    pub fn disparity_at(&self, row: usize, col: usize) -> Option<f64> {
        let d = self.disparity[row * self.left.cols() + col];
        d.is_finite().then_some(d)
    }
}

const SUPERSAMPLE: usize = 2;

impl SceneSpec {
    fn ray(&self, col: f64, row: f64) -> Vector3<f64> {
        let c = &self.camera;
        Vector3::new((col - c.cx) / c.focal, 1.0, -(row - c.cy) / c.focal)
    }

    fn render_view(&self, origin: Point3<f64>) -> GrayImage {
        let c = self.camera;
        let mut data = vec![0u8; c.rows * c.cols];
        par::for_each_row(&mut data, c.cols, |r, out| {
            for (col, px) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let u = col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let v = r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        acc += match self.cast(&origin, &self.ray(u, v)) {
                            Some(h) => 255.0 * self.shade(&h),
                            None => SKY_INTENSITY as f64,
                        };
                    }
                }
                let mut value = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                if let Some(g) = &self.glare {
                    let d2 = ((col as f64 - g.center[0]).powi(2) + (r as f64 - g.center[1]).powi(2)) / (g.radius * g.radius);
                    value += 255.0 * g.gain * (1.0 - d2).max(0.0);
                }
                *px = value.round().clamp(0.0, 255.0) as u8;
            }
        });
        GrayImage::from_vec(c.rows, c.cols, data).expect("camera size is nonzero")
    }

    pub fn left_origin(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, self.camera.height)
    }

    pub fn right_origin(&self) -> Point3<f64> {
        Point3::new(self.camera.baseline, 0.0, self.camera.height)
    }
}

/// Renders both views and the left-view ground truth.
pub fn render_stereo(scene: &SceneSpec) -> StereoRender {
    let c = scene.camera;
    let left = scene.render_view(scene.left_origin());
    let right = scene.render_view(scene.right_origin());
    let origin = scene.left_origin();
    let mut depth = vec![f64::NAN; c.rows * c.cols];
    par::for_each_row(&mut depth, c.cols, |r, out| {
        for (col, z) in out.iter_mut().enumerate() {
            // forward component of the ray is 1, so t is the depth
            if let Some(h) = scene.cast(&origin, &scene.ray(col as f64, r as f64)) {
                *z = h.point.y - origin.y;
            }
        }
    });
    let disparity: Vec<f64> = depth.iter().map(|z| c.focal * c.baseline / z).collect();
    let max_d = disparity.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
    let num = (((max_d + 1.0) / 16.0).ceil() as usize).max(1) * 16;
    let fixed = disparity
        .iter()
        .map(|d| {
            if d.is_finite() {
                (d * SUBPIXEL_SCALE as f64).round() as i32
            } else {
                DisparityMap::INVALID
            }
        })
        .collect();
    StereoRender {
        left,
        right,
        gt_disparity: DisparityMap::from_fixed(c.rows, c.cols, 0, num, fixed).expect("sized to image"),
        depth,
        disparity,
    }
}

// LRF

/// Exact range (mm) per whole degree in the scan plane, None when nothing is hit.
pub fn exact_ranges(scene: &SceneSpec) -> [Option<f64>; SLOTS] {
    let p = scene.lrf.pose;
    let origin = Point3::new(p.x, p.y, scene.lrf.height);
    let mut out = [None; SLOTS];
    for (a, slot) in out.iter_mut().enumerate() {
        let phi = (a as f64).to_radians() + p.theta;
        let d = Vector3::new(phi.cos(), phi.sin(), 0.0);
        *slot = scene.cast(&origin, &d).map(|h| h.t);
    }
    out
}

/// `realizations` independent noisy sweeps. Each realization draws from its
/// own stream of a generator seeded with `seed`.
pub fn raycast_sweep(scene: &SceneSpec, noise: &LrfNoise, realizations: usize, seed: u64) -> Vec<LrfSweep> {
    let exact = exact_ranges(scene);
    let gauss = Normal::new(0.0, noise.stddev_mm.max(0.0)).expect("finite stddev");
    (0..realizations)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut sweep = LrfSweep::empty();
            sweep.rpm_mean = scene.rpm;
            for a in 0..SLOTS {
                let jitter = gauss.sample(&mut rng);
                let outlier = rng.random::<f64>() < noise.outlier_prob;
                let draw = rng.random::<f64>();
                let value = if outlier {
                    Some(draw * noise.outlier_range_mm)
                } else {
                    exact[a].map(|r| r + jitter)
                };
                sweep.ranges[a] = value
                    .map(|v| v.round())
                    .filter(|v| *v >= 0.0 && *v <= lrf::MAX_ENCODABLE_MM as f64)
                    .map(|v| v as u16);
                if let Some(r) = sweep.ranges[a] {
                    sweep.strengths[a] = (4.0e8 / (r as f64 + 100.0).powi(2)).min(u16::MAX as f64) as u16;
                }
            }
            sweep
        })
        .collect()
}

/// 90 checksummed packets covering the sweep in angle order.
pub fn encode_packets(sweep: &LrfSweep, rpm: f64) -> Vec<u8> {
    let speed = (rpm * 64.0).round().clamp(0.0, u16::MAX as f64) as u16;
    let mut out = Vec::with_capacity(90 * lrf::PACKET_LEN);
    for k in 0..90u8 {
        let mut readings = [Reading::default(); 4];
        for (slot, r) in readings.iter_mut().enumerate() {
            let a = 4 * k as usize + slot;
            *r = Reading {
                distance_mm: sweep.ranges[a].filter(|d| *d <= lrf::MAX_ENCODABLE_MM),
                strength: sweep.strengths[a],
                strength_warning: sweep.warnings[a],
            };
        }
        let packet = LrfPacket {
            index: lrf::FIRST_INDEX + k,
            speed,
            readings,
            checksum_ok: true,
        };
        out.extend_from_slice(&lrf::encode_packet(&packet));
    }
    out
}

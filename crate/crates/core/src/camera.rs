//! Pinhole projection with the rational radial + tangential lens model.
//!
//! A camera-frame point `(x, y, z)` maps to normalized coordinates
//! `x' = x/z, y' = y/z`, is distorted to `(x'', y'')`, and lands at pixel
//! `u = fx x'' + cx, v = fy y'' + cy`. With `r² = x'² + y'²`:
//!
//! ```text
//! radial = (1 + k1 r² + k2 r⁴ + k3 r⁶) / (1 + k4 r² + k5 r⁴ + k6 r⁶)
//! x'' = x' radial + 2 p1 x'y' + p2 (r² + 2x'²)
//! y'' = y' radial + p1 (r² + 2y'²) + 2 p2 x'y'
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Pixel};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid distortion coefficients: {0}")]
    InvalidDistortion(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("rational distortion denominator is non-positive ({value}) at r² = {r2}")]
    DenominatorNonPositive { r2: f64, value: f64 },
    #[error("undistortion did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// Focal lengths and principal point, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx = {fx}, fy = {fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point must be finite ({cx}, {cy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// The 3x3 camera matrix `[[fx,0,cx],[0,fy,cy],[0,0,1]]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Whether the principal point falls inside a `rows x cols` image. Being
    /// outside is legal but usually indicates swapped or mis-scaled values.
    pub fn principal_point_inside(&self, rows: usize, cols: usize) -> bool {
        (0.0..cols as f64).contains(&self.cx) && (0.0..rows as f64).contains(&self.cy)
    }

    pub fn to_pixel(&self, p: NormalizedPoint) -> PixelPoint {
        PixelPoint {
            u: self.fx * p.x + self.cx,
            v: self.fy * p.y + self.cy,
        }
    }

    pub fn to_normalized(&self, p: PixelPoint) -> NormalizedPoint {
        NormalizedPoint {
            x: (p.u - self.cx) / self.fx,
            y: (p.v - self.cy) / self.fy,
        }
    }
}

pub const DEFAULT_WORKING_RADIUS: f64 = 2.0;

/// Rational radial (`k1..k6`) and tangential (`p1, p2`) lens coefficients,
/// validated over the working domain `r <= working_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionCoefficients {
    k: [f64; 6],
    p1: f64,
    p2: f64,
    working_radius: f64,
}

impl Default for DistortionCoefficients {
    fn default() -> Self {
        Self::zero()
    }
}

impl DistortionCoefficients {
    pub fn zero() -> Self {
        Self {
            k: [0.0; 6],
            p1: 0.0,
            p2: 0.0,
            working_radius: DEFAULT_WORKING_RADIUS,
        }
    }

    pub fn new(k: [f64; 6], p1: f64, p2: f64) -> Result<Self, CameraError> {
        Self::with_working_radius(k, p1, p2, DEFAULT_WORKING_RADIUS)
    }

    pub fn with_working_radius(
        k: [f64; 6],
        p1: f64,
        p2: f64,
        working_radius: f64,
    ) -> Result<Self, CameraError> {
        if k.iter().chain([p1, p2].iter()).any(|v| !v.is_finite()) {
            return Err(CameraError::InvalidDistortion(
                "coefficients must be finite".into(),
            ));
        }
        if !(working_radius > 0.0 && working_radius.is_finite()) {
            return Err(CameraError::InvalidDistortion(format!(
                "working radius must be positive, got {working_radius}"
            )));
        }
        let coeffs = Self {
            k,
            p1,
            p2,
            working_radius,
        };
        coeffs.check_denominator()?;
        Ok(coeffs)
    }

    /// Accepts the file layouts `k1 k2 k3`, `k1 k2 k3 p1 p2` and
    /// `k1 k2 k3 p1 p2 k4 k5 k6`; missing trailing terms are zero.
    pub fn from_slice(values: &[f64]) -> Result<Self, CameraError> {
        let mut k = [0.0; 6];
        let (mut p1, mut p2) = (0.0, 0.0);
        match values.len() {
            3 | 5 | 8 => {}
            n if n > 8 => {
                return Err(CameraError::InvalidDistortion(format!(
                    "{n} coefficients given; the model has at most 8 (k1 k2 k3 p1 p2 k4 k5 k6)"
                )))
            }
            n => {
                return Err(CameraError::InvalidDistortion(format!(
                    "expected 3, 5 or 8 coefficients, got {n}"
                )))
            }
        }
        k[..3].copy_from_slice(&values[..3]);
        if values.len() >= 5 {
            p1 = values[3];
            p2 = values[4];
        }
        if values.len() == 8 {
            k[3..].copy_from_slice(&values[5..]);
        }
        Self::new(k, p1, p2)
    }

    /// Same coefficients validated over a different working radius.
    pub fn with_radius(self, working_radius: f64) -> Result<Self, CameraError> {
        Self::with_working_radius(self.k, self.p1, self.p2, working_radius)
    }

    /// Coefficients in file order: `k1 k2 k3 p1 p2 k4 k5 k6`.
    pub fn to_file_order(&self) -> [f64; 8] {
        let k = self.k;
        [k[0], k[1], k[2], self.p1, self.p2, k[3], k[4], k[5]]
    }

    pub fn radial(&self) -> [f64; 6] {
        self.k
    }

    pub fn tangential(&self) -> (f64, f64) {
        (self.p1, self.p2)
    }

    pub fn working_radius(&self) -> f64 {
        self.working_radius
    }

    pub fn is_zero(&self) -> bool {
        self.k.iter().all(|&v| v == 0.0) && self.p1 == 0.0 && self.p2 == 0.0
    }

    fn denominator(&self, r2: f64) -> f64 {
        1.0 + r2 * (self.k[3] + r2 * (self.k[4] + r2 * self.k[5]))
    }

    fn numerator(&self, r2: f64) -> f64 {
        1.0 + r2 * (self.k[0] + r2 * (self.k[1] + r2 * self.k[2]))
    }

    /// The denominator is a cubic in `s = r²`; its minimum over
    /// `[0, r_max²]` is at an endpoint or a stationary point.
    fn check_denominator(&self) -> Result<(), CameraError> {
        let s_max = self.working_radius * self.working_radius;
        let mut candidates = vec![0.0, s_max];
        let (a, b, c) = (3.0 * self.k[5], 2.0 * self.k[4], self.k[3]);
        if a.abs() > f64::EPSILON {
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                candidates.push((-b + sq) / (2.0 * a));
                candidates.push((-b - sq) / (2.0 * a));
            }
        } else if b.abs() > f64::EPSILON {
            candidates.push(-c / b);
        }
        for s in candidates.into_iter().filter(|s| (0.0..=s_max).contains(s)) {
            let value = self.denominator(s);
            if value <= 0.0 {
                return Err(CameraError::DenominatorNonPositive { r2: s, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// World point in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// `x_cam = rotation * X_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: WorldPoint) -> Vector3<f64> {
        self.rotation * p.to_vector() + self.translation
    }
}

/// Applies the lens model to a normalized point.
pub fn distort(p: NormalizedPoint, dist: &DistortionCoefficients) -> Result<NormalizedPoint, CameraError> {
    let (x, y) = (p.x, p.y);
    let r2 = x * x + y * y;
    let den = dist.denominator(r2);
    if den <= 0.0 {
        return Err(CameraError::DenominatorNonPositive { r2, value: den });
    }
    let radial = dist.numerator(r2) / den;
    let xy2 = 2.0 * x * y;
    Ok(NormalizedPoint {
        x: x * radial + dist.p1 * xy2 + dist.p2 * (r2 + 2.0 * x * x),
        y: y * radial + dist.p1 * (r2 + 2.0 * y * y) + dist.p2 * xy2,
    })
}

pub const DEFAULT_UNDISTORT_TOL: f64 = 1e-10;
pub const DEFAULT_UNDISTORT_MAX_ITER: usize = 50;

/// Inverts [`distort`] by fixed-point iteration on
/// `x = (x_d - tangential(x)) / radial(x)`; stops once `distort(x)` is
/// within `tol` (max-norm) of the input.
pub fn undistort(
    p: NormalizedPoint,
    dist: &DistortionCoefficients,
    tol: f64,
    max_iter: usize,
) -> Result<NormalizedPoint, CameraError> {
    if dist.is_zero() {
        return Ok(p);
    }
    let residual_of = |q: NormalizedPoint| -> Result<f64, CameraError> {
        let d = distort(q, dist)?;
        Ok((d.x - p.x).abs().max((d.y - p.y).abs()))
    };
    let mut q = p;
    let mut residual = residual_of(q)?;
    for _ in 0..max_iter {
        if residual <= tol {
            return Ok(q);
        }
        let r2 = q.x * q.x + q.y * q.y;
        let den = dist.denominator(r2);
        if den <= 0.0 {
            return Err(CameraError::DenominatorNonPositive { r2, value: den });
        }
        let radial = dist.numerator(r2) / den;
        let xy2 = 2.0 * q.x * q.y;
        let dx = dist.p1 * xy2 + dist.p2 * (r2 + 2.0 * q.x * q.x);
        let dy = dist.p1 * (r2 + 2.0 * q.y * q.y) + dist.p2 * xy2;
        q = NormalizedPoint {
            x: (p.x - dx) / radial,
            y: (p.y - dy) / radial,
        };
        if !(q.x.is_finite() && q.y.is_finite()) {
            break;
        }
        residual = residual_of(q)?;
    }
    if residual <= tol {
        Ok(q)
    } else {
        Err(CameraError::NoConvergence {
            iterations: max_iter,
            residual,
        })
    }
}

/// Projects a world point through `pose`, the lens model and `intr`.
pub fn project(
    point: WorldPoint,
    pose: &RigidTransform,
    intr: &CameraIntrinsics,
    dist: &DistortionCoefficients,
) -> Result<PixelPoint, CameraError> {
    let cam = pose.apply(point);
    if cam.z <= 0.0 {
        return Err(CameraError::BehindCamera { z: cam.z });
    }
    let normalized = NormalizedPoint::new(cam.x / cam.z, cam.y / cam.z);
    Ok(intr.to_pixel(distort(normalized, dist)?))
}

/// Per-pixel source coordinates `(x = column, y = row)` for [`remap_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct RemapGrid {
    rows: usize,
    cols: usize,
    coords: Vec<[f32; 2]>,
}

impl RemapGrid {
    pub fn new(rows: usize, cols: usize, coords: Vec<[f32; 2]>) -> Option<Self> {
        (rows > 0 && cols > 0 && coords.len() == rows * cols).then_some(Self { rows, cols, coords })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> [f32; 2]) -> Self {
        let coords = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self { rows, cols, coords }
    }

    pub fn identity(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| [c as f32, r as f32])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 2] {
        self.coords[row * self.cols + col]
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }
}

/// Bilinear sample at `(x, y)`; neighbours outside the image read as zero.
pub fn sample_bilinear<T: Pixel>(img: &Image<T>, x: f64, y: f64) -> f64 {
    if !(x.is_finite() && y.is_finite()) {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let (ax, ay) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let at = |r: isize, c: isize| img.get_checked(r, c).map_or(0.0, Pixel::to_f64);
    let mut acc = 0.0;
    for (dr, wy) in [(0, 1.0 - ay), (1, ay)] {
        for (dc, wx) in [(0, 1.0 - ax), (1, ax)] {
            let w = wx * wy;
            if w != 0.0 {
                acc += w * at(yi + dr, xi + dc);
            }
        }
    }
    acc
}

/// Resamples `img` at the grid's source coordinates with bilinear
/// interpolation and a constant-zero border.
pub fn remap_image<T: Pixel>(img: &Image<T>, grid: &RemapGrid) -> Image<T> {
    let mut out = Image::new(grid.rows, grid.cols).expect("grid dimensions are non-zero");
    let cols = grid.cols;
    par::for_each_row(out.data_mut(), cols, |r, row| {
        for (c, px) in row.iter_mut().enumerate() {
            let [x, y] = grid.get(r, c);
            *px = T::from_f64(sample_bilinear(img, x as f64, y as f64));
        }
    });
    out
}

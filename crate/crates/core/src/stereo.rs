//! Two-camera rig geometry: essential and fundamental matrices, rectifying
//! remap grids, and disparity triangulation.
//!
//! `rotation` and `translation` give the right camera's pose in the left
//! camera frame: `X_left = R X_right + t`. Under this convention
//! `E = Rᵀ [t]×` satisfies `x_rᵀ E x_l = 0` for normalized correspondences
//! and `F = K_r⁻ᵀ E K_l⁻¹` satisfies `p_rᵀ F p_l = 0` for pixels.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    distort, CameraError, CameraIntrinsics, DistortionCoefficients, NormalizedPoint, RemapGrid,
    WorldPoint,
};
use crate::io::kv::{Document, Writer};
use crate::io::FormatError;
use crate::par;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("baseline has zero length")]
    DegenerateBaseline,
    #[error("rotation is not orthonormal: max |RᵀR - I| = {deviation:.2e}, det = {det:.4}")]
    NotARotation { deviation: f64, det: f64 },
    #[error("disparity must be positive, got {0}")]
    NonPositiveDisparity(f64),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Maximum entry of `|RᵀR − I|` tolerated for a loaded rotation. Calibration
/// outputs printed with four decimals are orthonormal only to about 1e-4.
pub const ROTATION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub distortion: DistortionCoefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// `[v]×`, so that `skew(a) * b = a × b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let deviation = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if deviation > ROTATION_TOLERANCE || det <= 0.0 || !deviation.is_finite() {
        return Err(GeometryError::NotARotation { deviation, det });
    }
    Ok(())
}

/// `E = Rᵀ [t]×`.
pub fn essential_from_rt(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Result<Matrix3<f64>, GeometryError> {
    if translation.norm() == 0.0 {
        return Err(GeometryError::DegenerateBaseline);
    }
    Ok(rotation.transpose() * skew(translation))
}

/// `F = K_right⁻ᵀ E K_left⁻¹`, left unnormalized.
pub fn fundamental_from_essential(
    essential: &Matrix3<f64>,
    left: &CameraIntrinsics,
    right: &CameraIntrinsics,
) -> Matrix3<f64> {
    right.inverse_matrix().transpose() * essential * left.inverse_matrix()
}

/// Depth from disparity on a rectified rig. `x_l`, `y_l` are left-image
/// coordinates relative to the rectified principal point; `f` in pixels,
/// `baseline` in millimetres.
pub fn triangulate(
    disparity: f64,
    x_l: f64,
    y_l: f64,
    f: f64,
    baseline: f64,
) -> Result<WorldPoint, GeometryError> {
    if !(disparity > 0.0) {
        return Err(GeometryError::NonPositiveDisparity(disparity));
    }
    let scale = baseline / disparity;
    Ok(WorldPoint::new(x_l * scale, y_l * scale, f * scale))
}

impl StereoRig {
    pub fn new(
        left: CameraModel,
        right: CameraModel,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if !(translation.norm() > 0.0) {
            return Err(GeometryError::DegenerateBaseline);
        }
        Ok(Self {
            left,
            right,
            rotation,
            translation,
        })
    }

    /// An ideal rectified pair: identical distortion-free cameras, right
    /// camera `baseline` mm along +x.
    pub fn ideal(intrinsics: CameraIntrinsics, baseline: f64) -> Result<Self, GeometryError> {
        let cam = CameraModel {
            intrinsics,
            distortion: DistortionCoefficients::zero(),
        };
        // right camera centre sits at +baseline in the left frame
        Self::new(cam, cam, Matrix3::identity(), Vector3::new(baseline, 0.0, 0.0))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn baseline(&self) -> f64 {
        self.translation.norm()
    }

    pub fn essential(&self) -> Matrix3<f64> {
        essential_from_rt(&self.rotation, &self.translation).expect("validated baseline")
    }

    pub fn fundamental(&self) -> Matrix3<f64> {
        fundamental_from_essential(
            &self.essential(),
            &self.left.intrinsics,
            &self.right.intrinsics,
        )
    }

    /// Maps a left-camera point into the right camera frame.
    pub fn left_to_right(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Parses `[left]`, `[right]` and `[stereo]` sections of a calibration
    /// file.
    pub fn from_calibration(doc: &Document) -> Result<Self, GeometryError> {
        let camera = |name: &str| -> Result<CameraModel, GeometryError> {
            let s = doc.require_section(name)?;
            let intrinsics = CameraIntrinsics::new(
                s.value("fx")?,
                s.value("fy")?,
                s.value("cx")?,
                s.value("cy")?,
            )?;
            let mut distortion = if s.has("dist") {
                DistortionCoefficients::from_slice(&s.values::<f64>("dist")?)?
            } else {
                DistortionCoefficients::zero()
            };
            if s.has("r_max") {
                distortion = distortion.with_radius(s.value("r_max")?)?;
            }
            Ok(CameraModel {
                intrinsics,
                distortion,
            })
        };
        let left = camera("left")?;
        let right = camera("right")?;
        let stereo = doc.require_section("stereo")?;
        let r: [f64; 9] = stereo.array("R")?;
        let t: [f64; 3] = stereo.array("t")?;
        Self::new(
            left,
            right,
            Matrix3::from_row_slice(&r),
            Vector3::from_column_slice(&t),
        )
    }

    pub fn read_calibration(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Self::from_calibration(&Document::read(path)?)
    }

    /// Inverse of [`StereoRig::from_calibration`].
    pub fn to_calibration(&self) -> String {
        let mut w = Writer::new();
        w.comment("X_left = R * X_right + t, millimetres");
        for (name, cam) in [("left", &self.left), ("right", &self.right)] {
            let i = &cam.intrinsics;
            w.section(name)
                .entry("fx", &[i.fx])
                .entry("fy", &[i.fy])
                .entry("cx", &[i.cx])
                .entry("cy", &[i.cy])
                .entry("dist", &cam.distortion.to_file_order())
                .entry("r_max", &[cam.distortion.working_radius()]);
        }
        let r = self.rotation;
        w.section("stereo")
            .entry("R", r.transpose().as_slice())
            .entry("t", self.translation.as_slice());
        w.finish()
    }
}

/// Rectifying remap grids plus the shared rectified pinhole camera.
#[derive(Debug, Clone)]
pub struct RectificationMaps {
    pub left_map: RemapGrid,
    pub right_map: RemapGrid,
    /// Rectified focal length (pixels), shared by both cameras.
    pub focal: f64,
    /// Baseline length (mm), equal to `‖t‖`.
    pub baseline: f64,
    /// Rectified principal point, shared by both cameras.
    pub cx: f64,
    pub cy: f64,
    /// Rotations from each original camera frame into the rectified frame.
    pub left_rotation: Matrix3<f64>,
    pub right_rotation: Matrix3<f64>,
    /// `+1` when the right camera sits on the +x side after rectification
    /// (disparities `x_l − x_r` positive), `-1` otherwise.
    pub disparity_sign: f64,
}

impl RectificationMaps {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.cx,
            cy: self.cy,
        }
    }

    /// Rectified pixel of a point given in the left camera frame, for the
    /// left (`right = false`) or right camera.
    pub fn project_rectified(&self, rig: &StereoRig, p_left: &Vector3<f64>, right: bool) -> Option<[f64; 2]> {
        let q = if right {
            self.right_rotation * rig.left_to_right(p_left)
        } else {
            self.left_rotation * p_left
        };
        (q.z > 0.0).then(|| [self.focal * q.x / q.z + self.cx, self.focal * q.y / q.z + self.cy])
    }
}

fn nearest_rotation(m: &Matrix3<f64>) -> Rotation3<f64> {
    Rotation3::from_matrix_eps(m, 1e-12, 100, Rotation3::identity())
}

/// Builds row-aligning remap grids for a `rows x cols` output.
///
/// The relative rotation is split evenly between the two cameras, then both
/// are turned so the rectified x-axis runs along the baseline. The rectified
/// focal length is the mean of the four focal lengths; the shared principal
/// point keeps the original principal rays centred on average.
pub fn build_rectification(
    rig: &StereoRig,
    rows: usize,
    cols: usize,
) -> Result<RectificationMaps, GeometryError> {
    if rig.translation.norm() == 0.0 {
        return Err(GeometryError::DegenerateBaseline);
    }
    // X_r = rel * X_l + offset
    let rel = nearest_rotation(&rig.rotation.transpose());
    let offset = -(rel * rig.translation);
    let half = Rotation3::new(rel.scaled_axis() * 0.5);
    // after the half rotations the cameras are parallel: X'_r = X'_l + b
    let b = half.inverse() * offset;
    let side = if b.x < 0.0 { -1.0 } else { 1.0 };
    let target = Vector3::new(side, 0.0, 0.0);
    let align = Rotation3::rotation_between(&b.normalize(), &target)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::y()), std::f64::consts::PI));
    let left_rotation = (align * half).into_inner();
    let right_rotation = (align * half.inverse()).into_inner();

    let (l, r) = (&rig.left.intrinsics, &rig.right.intrinsics);
    let focal = (l.fx + l.fy + r.fx + r.fy) / 4.0;
    let axis_offset = |rot: &Matrix3<f64>| {
        let ray = rot * Vector3::z();
        [focal * ray.x / ray.z, focal * ray.y / ray.z]
    };
    let (ol, or) = (axis_offset(&left_rotation), axis_offset(&right_rotation));
    let cx = (l.cx + r.cx) / 2.0 - (ol[0] + or[0]) / 2.0;
    let cy = (l.cy + r.cy) / 2.0 - (ol[1] + or[1]) / 2.0;

    let grid = |camera: &CameraModel, rotation: &Matrix3<f64>| -> RemapGrid {
        let back = rotation.transpose();
        let mut coords = vec![[0f32; 2]; rows * cols];
        par::for_each_row(&mut coords, cols, |v, row| {
            for (u, out) in row.iter_mut().enumerate() {
                let ray = back
                    * Vector3::new((u as f64 - cx) / focal, (v as f64 - cy) / focal, 1.0);
                *out = if ray.z <= 0.0 {
                    [f32::NAN, f32::NAN]
                } else {
                    match distort(NormalizedPoint::new(ray.x / ray.z, ray.y / ray.z), &camera.distortion) {
                        Ok(d) => {
                            let p = camera.intrinsics.to_pixel(d);
                            [p.u as f32, p.v as f32]
                        }
                        Err(_) => [f32::NAN, f32::NAN],
                    }
                };
            }
        });
        RemapGrid::new(rows, cols, coords).expect("sized grid")
    };

    Ok(RectificationMaps {
        left_map: grid(&rig.left, &left_rotation),
        right_map: grid(&rig.right, &right_rotation),
        focal,
        baseline: rig.translation.norm(),
        cx,
        cy,
        left_rotation,
        right_rotation,
        disparity_sign: -side,
    })
}

const RMAP_MAGIC: &[u8; 4] = b"RMAP";

/// Serializes a grid: 16-byte header (`RMAP`, rows, cols, channels = 2 as
/// little-endian u32) then interleaved little-endian f32 `(x, y)` pairs.
pub fn encode_rmap(grid: &RemapGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.coords().len() * 8);
    out.extend_from_slice(RMAP_MAGIC);
    out.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    for [x, y] in grid.coords() {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

pub fn decode_rmap(bytes: &[u8]) -> Result<RemapGrid, FormatError> {
    if bytes.len() < 16 || &bytes[..4] != RMAP_MAGIC {
        return Err(FormatError::Header("missing RMAP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols, channels) = (word(4), word(8), word(12));
    if channels != 2 {
        return Err(FormatError::Unsupported(format!("{channels} channels")));
    }
    if rows == 0 || cols == 0 {
        return Err(FormatError::Header("zero grid dimension".into()));
    }
    let expected = 16 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let coords = bytes[16..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            ]
        })
        .collect();
    Ok(RemapGrid::new(rows, cols, coords).expect("sized grid"))
}

pub fn write_rmap(path: impl AsRef<Path>, grid: &RemapGrid) -> Result<(), FormatError> {
    std::fs::write(path, encode_rmap(grid))?;
    Ok(())
}

pub fn read_rmap(path: impl AsRef<Path>) -> Result<RemapGrid, FormatError> {
    decode_rmap(&std::fs::read(path)?)
}

//! Object height from a disparity image, plus Canny edges and bounding
//! rectangles as the alternative pixel-height measurement.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::morph::{self, MorphError};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DimensionError {
    #[error("disparity image has no nonzero pixel")]
    EmptyDisparity,
    #[error("edge map contains no edge pixel")]
    NoEdges,
    #[error("reference span must be positive (got {span_px} px, {span_cm} cm)")]
    NonPositiveSpan { span_px: f64, span_cm: f64 },
    #[error("invalid edge parameters: {0}")]
    InvalidEdgeParams(String),
    #[error("invalid height configuration: {0}")]
    InvalidConfig(String),
}

impl From<MorphError> for DimensionError {
    fn from(_: MorphError) -> Self {
        DimensionError::EmptyDisparity
    }
}

/// Pixel-to-height conversion. The offset and scale only hold at the
/// geometry recorded alongside them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightConfig {
    pub ground_offset_px: u32,
    pub cm_per_px: f64,
    pub camera_height_cm: f64,
    pub working_distance_m: f64,
}

impl Default for HeightConfig {
    fn default() -> Self {
        Self {
            ground_offset_px: 53,
            cm_per_px: 0.116,
            camera_height_cm: 8.5,
            working_distance_m: 0.70,
        }
    }
}

impl HeightConfig {
    /// Offset and scale for a level pinhole camera `camera_height_mm` above
    /// the ground, with the object base `distance_mm` ahead: the base row is
    /// `cy + f·h/Z` and one pixel spans `Z/f` at that depth.
    pub fn from_geometry(focal_px: f64, cy: f64, rows: usize, camera_height_mm: f64, distance_mm: f64) -> Self {
        let base_row = cy + focal_px * camera_height_mm / distance_mm;
        Self {
            ground_offset_px: (rows as f64 - base_row).round().max(0.0) as u32,
            cm_per_px: distance_mm / focal_px / 10.0,
            camera_height_cm: camera_height_mm / 10.0,
            working_distance_m: distance_mm / 1000.0,
        }
    }

    pub fn validate(&self) -> Result<(), DimensionError> {
        if !(self.cm_per_px > 0.0 && self.cm_per_px.is_finite()) {
            return Err(DimensionError::InvalidConfig(format!(
                "cm_per_px must be positive, got {}",
                self.cm_per_px
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeightMethod {
    #[serde(rename = "max-intensity")]
    MaxIntensity,
    #[serde(rename = "canny-rect")]
    CannyRect,
}

impl HeightMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeightMethod::MaxIntensity => "max-intensity",
            HeightMethod::CannyRect => "canny-rect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightReport {
    pub height_cm: f64,
    pub height_px: u32,
    pub r_top: usize,
    pub threshold: Option<u8>,
    pub method: HeightMethod,
    /// Set when the detected region sits at or below the ground offset.
    pub degenerate: bool,
    pub geometry: HeightConfig,
}

impl HeightReport {
    fn build(rows: usize, r_top: usize, cfg: &HeightConfig, threshold: Option<u8>, method: HeightMethod) -> Self {
        let raw = rows as i64 - r_top as i64 - cfg.ground_offset_px as i64;
        let height_px = raw.max(0) as u32;
        Self {
            height_cm: height_px as f64 * cfg.cm_per_px,
            height_px,
            r_top,
            threshold,
            method,
            degenerate: raw <= 0,
            geometry: *cfg,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method.as_str());
        let _ = writeln!(s, "height_cm: {:.3}", self.height_cm);
        let _ = writeln!(s, "height_px: {}", self.height_px);
        let _ = writeln!(s, "r_top: {}", self.r_top);
        match self.threshold {
            Some(t) => {
                let _ = writeln!(s, "threshold: {t}");
            }
            None => {
                let _ = writeln!(s, "threshold: none");
            }
        }
        let _ = writeln!(s, "degenerate: {}", self.degenerate);
        let _ = writeln!(s, "ground_offset_px: {}", self.geometry.ground_offset_px);
        let _ = writeln!(s, "cm_per_px: {}", self.geometry.cm_per_px);
        let _ = writeln!(s, "camera_height_cm: {}", self.geometry.camera_height_cm);
        let _ = writeln!(s, "working_distance_m: {}", self.geometry.working_distance_m);
        s
    }
}

/// Scans rows top to bottom for the first pixel in the max-intensity band and
/// converts the distance from there to the image bottom, minus the ground
/// offset, into centimetres.
pub fn height_from_disparity(
    disp: &GrayImage,
    cfg: &HeightConfig,
    delta: u8,
) -> Result<HeightReport, DimensionError> {
    cfg.validate()?;
    let (threshold, _) = morph::max_intensity_threshold(disp, delta)?;
    let r_top = (0..disp.rows())
        .find(|&r| disp.row(r).iter().any(|&v| v >= threshold))
        .ok_or(DimensionError::EmptyDisparity)?;
    Ok(HeightReport::build(disp.rows(), r_top, cfg, Some(threshold), HeightMethod::MaxIntensity))
}

/// Height from the top of the edge bounding box, same offset and scale as the disparity method.
pub fn height_from_edges(edges: &GrayImage, cfg: &HeightConfig) -> Result<HeightReport, DimensionError> {
    cfg.validate()?;
    let rect = bounding_rect(edges)?;
    Ok(HeightReport::build(edges.rows(), rect.row0, cfg, None, HeightMethod::CannyRect))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    pub gaussian_sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            gaussian_sigma: 1.4,
            low_threshold: 40.0,
            high_threshold: 100.0,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<(), DimensionError> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(DimensionError::InvalidEdgeParams("sigma must be positive".into()));
        }
        if !(self.low_threshold > 0.0 && self.low_threshold < self.high_threshold) {
            return Err(DimensionError::InvalidEdgeParams(format!(
                "need 0 < low < high, got {} and {}",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let (rows, cols) = (img.rows(), img.cols());
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let mut horiz = vec![0.0; rows * cols];
    par::for_each_row(&mut horiz, cols, |r, out| {
        for (c, o) in out.iter_mut().enumerate() {
            *o = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * img.get_clamped(r as isize, c as isize + i as isize - radius) as f64)
                .sum();
        }
    });
    let mut out = vec![0.0; rows * cols];
    par::for_each_row(&mut out, cols, |r, dst| {
        for (c, o) in dst.iter_mut().enumerate() {
            *o = k
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let rr = (r as isize + i as isize - radius).clamp(0, rows as isize - 1) as usize;
                    w * horiz[rr * cols + c]
                })
                .sum();
        }
    });
    out
}

/// Binary edge map (255 = edge): Gaussian smoothing, Sobel gradients,
/// 4-direction non-maximum suppression, hysteresis with 8-connectivity.
pub fn canny_edges(img: &GrayImage, params: &EdgeParams) -> Result<GrayImage, DimensionError> {
    params.validate()?;
    let (rows, cols) = (img.rows(), img.cols());
    let smooth = blur(img, params.gaussian_sigma);
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, rows as isize - 1) as usize;
        let c = c.clamp(0, cols as isize - 1) as usize;
        smooth[r * cols + c]
    };

    let mut gx = vec![0.0; rows * cols];
    let mut gy = vec![0.0; rows * cols];
    let mut mag = vec![0.0; rows * cols];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let x = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r, c - 1)
                - at(r + 1, c - 1);
            let y = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r - 1, c)
                - at(r - 1, c + 1);
            let i = r as usize * cols + c as usize;
            gx[i] = x;
            gy[i] = y;
            mag[i] = x.hypot(y);
        }
    }

    let m = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            mag[r as usize * cols + c as usize]
        }
    };
    // 0 = strong, 1 = weak, 2 = none
    let mut class = vec![2u8; rows * cols];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let i = r as usize * cols + c as usize;
            let v = mag[i];
            if v < params.low_threshold {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dr, dc) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            // strict on one side so a two-pixel plateau thins to one
            if v > m(r - dr, c - dc) && v >= m(r + dr, c + dc) {
                class[i] = if v >= params.high_threshold { 0 } else { 1 };
            }
        }
    }

    let mut out = GrayImage::new(rows, cols).expect("nonempty input");
    let mut queue: VecDeque<usize> = (0..rows * cols).filter(|&i| class[i] == 0).collect();
    for &i in &queue {
        out.data_mut()[i] = 255;
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / cols) as isize, (i % cols) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let j = nr as usize * cols + nc as usize;
                if class[j] == 1 && out.data()[j] == 0 {
                    out.data_mut()[j] = 255;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Tight axis-aligned box around all nonzero pixels.
pub fn bounding_rect(edges: &GrayImage) -> Result<Rect, DimensionError> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..edges.rows() {
        for (c, &v) in edges.row(r).iter().enumerate() {
            if v == 0 {
                continue;
            }
            bounds = Some(match bounds {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or(DimensionError::NoEdges)?;
    Ok(Rect {
        row0: r0,
        col0: c0,
        rows: r1 - r0 + 1,
        cols: c1 - c0 + 1,
    })
}

pub fn pixel_scale_from_reference(span_px: f64, span_cm: f64) -> Result<f64, DimensionError> {
    if !(span_px > 0.0 && span_cm > 0.0) {
        return Err(DimensionError::NonPositiveSpan { span_px, span_cm });
    }
    Ok(span_cm / span_px)
}

//! Semi-global block matching: block SAD costs, multi-path aggregation,
//! winner-take-all with parabolic subpixel refinement and a uniqueness test,
//! left-right consistency, and 8-bit normalization.
//!
//! Disparities are stored in 1/16 pixel fixed point. Along a path direction
//! `r` the aggregated cost is
//!
//! ```text
//! L_r(p,d) = C(p,d) + min(L_r(p-r,d), L_r(p-r,d±1) + P1, min_k L_r(p-r,k) + P2)
//!                   - min_k L_r(p-r,k)
//! ```
//!
//! and `S(p,d)` sums `L_r` over all directions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, GrayImage16, Image};
use crate::io::kv::{Document, Writer};
use crate::io::FormatError;
use crate::par;

pub const SUBPIXEL_SCALE: i32 = 16;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid matcher parameters: {0}")]
    InvalidParams(String),
    #[error("disparity value {0} cannot be stored as 16-bit PGM")]
    Unrepresentable(i32),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    /// Odd side length of the SAD window.
    pub block_size: usize,
    /// Size of the disparity search range; a multiple of 16.
    pub num_disparities: usize,
    pub min_disparity: i32,
    /// Penalty for a disparity change of one pixel between neighbours.
    pub penalty_small: u32,
    /// Penalty for larger disparity jumps.
    pub penalty_large: u32,
    /// 4 or 8 aggregation directions.
    pub paths: u8,
    /// Left-right check tolerance in pixels (`f64::INFINITY` disables it).
    pub lr_threshold: f64,
    /// Percent margin the best cost must win by; 0 disables the test.
    pub uniqueness_ratio: u32,
}

impl Default for MatcherParams {
    fn default() -> Self {
        Self::with_block_size(9)
    }
}

impl MatcherParams {
    /// Defaults scaled to the block area: P1 = 8·b², P2 = 32·b².
    pub fn with_block_size(block_size: usize) -> Self {
        let area = (block_size * block_size) as u32;
        Self {
            block_size,
            num_disparities: 112,
            min_disparity: 0,
            penalty_small: 8 * area,
            penalty_large: 32 * area,
            paths: 8,
            lr_threshold: 1.0,
            uniqueness_ratio: 10,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let bad = |msg: String| Err(MatchError::InvalidParams(msg));
        if self.block_size < 3 || self.block_size.is_multiple_of(2) {
            return bad(format!("block_size must be odd and >= 3, got {}", self.block_size));
        }
        if self.num_disparities < 16 || !self.num_disparities.is_multiple_of(16) {
            return bad(format!(
                "num_disparities must be a positive multiple of 16, got {}",
                self.num_disparities
            ));
        }
        if !(0 < self.penalty_small && self.penalty_small < self.penalty_large) {
            return bad(format!(
                "need 0 < penalty_small < penalty_large, got {} and {}",
                self.penalty_small, self.penalty_large
            ));
        }
        if self.paths != 4 && self.paths != 8 {
            return bad(format!("paths must be 4 or 8, got {}", self.paths));
        }
        if self.lr_threshold.is_nan() || self.lr_threshold < 0.0 {
            return bad(format!("lr_threshold must be >= 0, got {}", self.lr_threshold));
        }
        Ok(())
    }

    /// Cost assigned when the block does not fit inside both images.
    pub fn saturation_cost(&self) -> u32 {
        255 * (self.block_size * self.block_size) as u32
    }

    pub fn max_disparity(&self) -> i32 {
        self.min_disparity + self.num_disparities as i32 - 1
    }
}

/// Smallest multiple of 16 covering an object at `depth_mm` with 16 levels
/// of headroom: `ceil16(f·T/Z + 16)`.
pub fn suggest_num_disparities(focal_px: f64, baseline_mm: f64, depth_mm: f64) -> usize {
    let needed = focal_px * baseline_mm / depth_mm + 16.0;
    ((needed / 16.0).ceil() as usize).max(1) * 16
}

/// Dense `rows x cols x num_disparities` cost array, disparity fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostVolume {
    rows: usize,
    cols: usize,
    ndisp: usize,
    min_disparity: i32,
    data: Vec<u32>,
}

impl CostVolume {
    pub fn from_vec(
        rows: usize,
        cols: usize,
        ndisp: usize,
        min_disparity: i32,
        data: Vec<u32>,
    ) -> Option<Self> {
        (rows * cols * ndisp == data.len() && ndisp > 0).then_some(Self {
            rows,
            cols,
            ndisp,
            min_disparity,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_disparities(&self) -> usize {
        self.ndisp
    }

    pub fn min_disparity(&self) -> i32 {
        self.min_disparity
    }

    /// Costs for all disparities at one pixel.
    #[inline]
    pub fn slice(&self, row: usize, col: usize) -> &[u32] {
        let start = (row * self.cols + col) * self.ndisp;
        &self.data[start..start + self.ndisp]
    }

    /// Cost at disparity index `k` (disparity `min_disparity + k`).
    #[inline]
    pub fn get(&self, row: usize, col: usize, k: usize) -> u32 {
        self.data[(row * self.cols + col) * self.ndisp + k]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    fn with_data(&self, data: Vec<u32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            rows: self.rows,
            cols: self.cols,
            ndisp: self.ndisp,
            min_disparity: self.min_disparity,
            data,
        }
    }
}

fn check_same_size(left: &GrayImage, right: &GrayImage) -> Result<(), MatchError> {
    if left.rows() != right.rows() || left.cols() != right.cols() {
        return Err(MatchError::DimensionMismatch {
            left: (left.rows(), left.cols()),
            right: (right.rows(), right.cols()),
        });
    }
    Ok(())
}

/// Block SAD between the left block at `p` and the right block at `p`
/// shifted left by `d`. Blocks that leave either image cost
/// [`MatcherParams::saturation_cost`].
pub fn matching_cost(
    left: &GrayImage,
    right: &GrayImage,
    params: &MatcherParams,
) -> Result<CostVolume, MatchError> {
    params.validate()?;
    check_same_size(left, right)?;
    let (rows, cols, ndisp) = (left.rows(), left.cols(), params.num_disparities);
    let half = (params.block_size / 2) as isize;
    let saturated = params.saturation_cost();
    let mut data = vec![saturated; rows * cols * ndisp];
    par::for_each_row(&mut data, cols * ndisp, |r, out| {
        let r = r as isize;
        if r - half < 0 || r + half >= rows as isize {
            return;
        }
        let mut column_sums = vec![0u32; cols];
        for k in 0..ndisp {
            let d = params.min_disparity as isize + k as isize;
            // columns whose shifted counterpart exists in the right image
            let first = d.max(0) as usize;
            let last = (cols as isize + d.min(0)) as usize; // exclusive
            if first >= last {
                continue;
            }
            for c in first..last {
                let rc = (c as isize - d) as usize;
                let mut acc = 0u32;
                for i in (r - half)..=(r + half) {
                    let (lrow, rrow) = (left.row(i as usize), right.row(i as usize));
                    acc += lrow[c].abs_diff(rrow[rc]) as u32;
                }
                column_sums[c] = acc;
            }
            // window must satisfy first <= c - half and c + half < last
            let lo = first as isize + half;
            let hi = last as isize - 1 - half;
            if lo > hi {
                continue;
            }
            let mut window: u32 = column_sums[(lo - half) as usize..=(lo + half) as usize]
                .iter()
                .sum();
            for c in lo..=hi {
                if c > lo {
                    window += column_sums[(c + half) as usize];
                    window -= column_sums[(c - half - 1) as usize];
                }
                out[c as usize * ndisp + k] = window;
            }
        }
    });
    Ok(CostVolume {
        rows,
        cols,
        ndisp,
        min_disparity: params.min_disparity,
        data,
    })
}

/// A scan direction `(dr, dc)`: the predecessor of `(r, c)` is
/// `(r - dr, c - dc)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathDirection {
    pub dr: i8,
    pub dc: i8,
}

pub const FOUR_PATHS: [PathDirection; 4] = [
    PathDirection { dr: 0, dc: 1 },
    PathDirection { dr: 0, dc: -1 },
    PathDirection { dr: 1, dc: 0 },
    PathDirection { dr: -1, dc: 0 },
];

pub const EIGHT_PATHS: [PathDirection; 8] = [
    PathDirection { dr: 0, dc: 1 },
    PathDirection { dr: 0, dc: -1 },
    PathDirection { dr: 1, dc: 0 },
    PathDirection { dr: -1, dc: 0 },
    PathDirection { dr: 1, dc: 1 },
    PathDirection { dr: 1, dc: -1 },
    PathDirection { dr: -1, dc: 1 },
    PathDirection { dr: -1, dc: -1 },
];

/// One step of the path recurrence: fills `out` from the pixel cost and the
/// predecessor's path costs.
#[inline]
fn path_step(cost: &[u32], prev: Option<&[u32]>, p1: u32, p2: u32, out: &mut [u32]) {
    let Some(prev) = prev else {
        out.copy_from_slice(cost);
        return;
    };
    let n = cost.len();
    let prev_min = prev.iter().copied().min().unwrap_or(0);
    let jump = prev_min.saturating_add(p2);
    for d in 0..n {
        let mut best = prev[d].min(jump);
        if d > 0 {
            best = best.min(prev[d - 1].saturating_add(p1));
        }
        if d + 1 < n {
            best = best.min(prev[d + 1].saturating_add(p1));
        }
        out[d] = cost[d].saturating_add(best - prev_min);
    }
}

/// Path costs `L_r` for a single direction.
pub fn aggregate_path(
    costs: &CostVolume,
    dir: PathDirection,
    penalty_small: u32,
    penalty_large: u32,
) -> CostVolume {
    let (n, cols) = (costs.ndisp, costs.cols);
    let row_len = cols * n;
    let mut data = vec![0u32; costs.data.len()];
    let col_order: Vec<usize> = if dir.dc >= 0 {
        (0..cols).collect()
    } else {
        (0..cols).rev().collect()
    };
    if dir.dr == 0 {
        // rows are independent
        par::for_each_row(&mut data, row_len, |r, out| {
            let mut prev = vec![0u32; n];
            for (i, &c) in col_order.iter().enumerate() {
                let cur = &mut out[c * n..(c + 1) * n];
                let pred = (i > 0 && dir.dc != 0).then_some(prev.as_slice());
                path_step(costs.slice(r, c), pred, penalty_small, penalty_large, cur);
                prev.copy_from_slice(cur);
            }
        });
    } else {
        let row_order: Vec<usize> = if dir.dr > 0 {
            (0..costs.rows).collect()
        } else {
            (0..costs.rows).rev().collect()
        };
        let mut prev: Vec<u32> = Vec::with_capacity(row_len);
        for r in row_order {
            let out = &mut data[r * row_len..(r + 1) * row_len];
            for c in 0..cols {
                let pc = c as isize - dir.dc as isize;
                let pred = (!prev.is_empty() && (0..cols as isize).contains(&pc))
                    .then(|| &prev[pc as usize * n..(pc as usize + 1) * n]);
                path_step(
                    costs.slice(r, c),
                    pred,
                    penalty_small,
                    penalty_large,
                    &mut out[c * n..(c + 1) * n],
                );
            }
            prev.clear();
            prev.extend_from_slice(out);
        }
    }
    costs.with_data(data)
}

/// Sums path costs over 4 or 8 directions.
pub fn aggregate(costs: &CostVolume, params: &MatcherParams) -> Result<CostVolume, MatchError> {
    params.validate()?;
    let dirs: &[PathDirection] = if params.paths == 4 {
        &FOUR_PATHS
    } else {
        &EIGHT_PATHS
    };
    let mut sum = vec![0u32; costs.data.len()];
    for &dir in dirs {
        let path = aggregate_path(costs, dir, params.penalty_small, params.penalty_large);
        for (s, l) in sum.iter_mut().zip(&path.data) {
            *s = s.saturating_add(*l);
        }
    }
    Ok(costs.with_data(sum))
}

/// Per-pixel disparity in 1/16 px; [`DisparityMap::INVALID`] where
/// rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisparityMap {
    rows: usize,
    cols: usize,
    min_disparity: i32,
    num_disparities: usize,
    values: Vec<i32>,
}

impl DisparityMap {
    pub const INVALID: i32 = i32::MIN;

    pub fn new_invalid(rows: usize, cols: usize, min_disparity: i32, num_disparities: usize) -> Self {
        Self {
            rows,
            cols,
            min_disparity,
            num_disparities,
            values: vec![Self::INVALID; rows * cols],
        }
    }

    pub fn from_fixed(
        rows: usize,
        cols: usize,
        min_disparity: i32,
        num_disparities: usize,
        values: Vec<i32>,
    ) -> Option<Self> {
        (values.len() == rows * cols).then_some(Self {
            rows,
            cols,
            min_disparity,
            num_disparities,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn min_disparity(&self) -> i32 {
        self.min_disparity
    }

    pub fn num_disparities(&self) -> usize {
        self.num_disparities
    }

    #[inline]
    pub fn fixed(&self, row: usize, col: usize) -> i32 {
        self.values[row * self.cols + col]
    }

    pub fn set_fixed(&mut self, row: usize, col: usize, value: i32) {
        self.values[row * self.cols + col] = value;
    }

    /// Disparity in pixels, `None` if invalid.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.fixed(row, col);
        (v != Self::INVALID).then(|| v as f64 / SUBPIXEL_SCALE as f64)
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != Self::INVALID).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.values.len() as f64
    }

    fn same_shape(&self, other: &Self) -> Result<(), MatchError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatchError::DimensionMismatch {
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        Ok(())
    }

    /// 16-bit image with `value = fixed + 1` and 0 for invalid pixels.
    pub fn to_pgm16(&self) -> Result<GrayImage16, MatchError> {
        let data = self
            .values
            .iter()
            .map(|&v| {
                if v == Self::INVALID {
                    Ok(0u16)
                } else if (0..u16::MAX as i32).contains(&v) {
                    Ok(v as u16 + 1)
                } else {
                    Err(MatchError::Unrepresentable(v))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Image::from_vec(self.rows, self.cols, data).expect("sized"))
    }

    pub fn from_pgm16(img: &GrayImage16, min_disparity: i32, num_disparities: usize) -> Self {
        let values = img
            .data()
            .iter()
            .map(|&v| if v == 0 { Self::INVALID } else { v as i32 - 1 })
            .collect();
        Self {
            rows: img.rows(),
            cols: img.cols(),
            min_disparity,
            num_disparities,
            values,
        }
    }
}

/// Winner-take-all with parabola refinement and uniqueness rejection.
pub fn select_disparity(aggregated: &CostVolume, params: &MatcherParams) -> DisparityMap {
    let (rows, cols, n) = (aggregated.rows, aggregated.cols, aggregated.ndisp);
    let mut values = vec![DisparityMap::INVALID; rows * cols];
    let min_d = aggregated.min_disparity;
    let ratio = params.uniqueness_ratio as u64;
    par::for_each_row(&mut values, cols, |r, out| {
        for (c, value) in out.iter_mut().enumerate() {
            let s = aggregated.slice(r, c);
            let (mut best_k, mut best) = (0usize, u32::MAX);
            for (k, &v) in s.iter().enumerate() {
                if v < best {
                    best = v;
                    best_k = k;
                }
            }
            if ratio > 0 {
                let limit = best as u64 * (100 + ratio);
                let ambiguous = s.iter().enumerate().any(|(k, &v)| {
                    k.abs_diff(best_k) > 1 && (v as u64) * 100 <= limit
                });
                if ambiguous {
                    continue;
                }
            }
            let mut offset = 0.0;
            if best_k > 0 && best_k + 1 < n {
                let (a, b, c2) = (s[best_k - 1] as f64, best as f64, s[best_k + 1] as f64);
                let denom = a - 2.0 * b + c2;
                if denom > 0.0 {
                    offset = (a - c2) / (2.0 * denom);
                }
            }
            let d = (min_d + best_k as i32) as f64 + offset;
            *value = (d * SUBPIXEL_SCALE as f64).round() as i32;
        }
    });
    DisparityMap {
        rows,
        cols,
        min_disparity: min_d,
        num_disparities: n,
        values,
    }
}

/// Integer disparities for the right view from the left-referenced volume:
/// `d_R(x) = argmin_d S(x + d, d)`.
pub fn right_disparity(aggregated: &CostVolume) -> DisparityMap {
    let (rows, cols, n) = (aggregated.rows, aggregated.cols, aggregated.ndisp);
    let min_d = aggregated.min_disparity;
    let mut values = vec![DisparityMap::INVALID; rows * cols];
    par::for_each_row(&mut values, cols, |r, out| {
        for (x, value) in out.iter_mut().enumerate() {
            let mut best: Option<(u32, i32)> = None;
            for k in 0..n {
                let d = min_d + k as i32;
                let xl = x as i64 + d as i64;
                if xl < 0 || xl >= cols as i64 {
                    continue;
                }
                let v = aggregated.get(r, xl as usize, k);
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, d));
                }
            }
            if let Some((_, d)) = best {
                *value = d * SUBPIXEL_SCALE;
            }
        }
    });
    DisparityMap {
        rows,
        cols,
        min_disparity: min_d,
        num_disparities: n,
        values,
    }
}

/// Keeps a left pixel iff `|d_L(x) − d_R(x − d_L(x))| <= threshold` pixels.
pub fn lr_consistency(
    left: &DisparityMap,
    right: &DisparityMap,
    threshold: f64,
) -> Result<DisparityMap, MatchError> {
    left.same_shape(right)?;
    let mut out = left.clone();
    for r in 0..left.rows {
        for c in 0..left.cols {
            let Some(dl) = left.get(r, c) else { continue };
            let xr = c as i64 - dl.round() as i64;
            let diff = if (0..left.cols as i64).contains(&xr) {
                right.get(r, xr as usize).map_or(f64::INFINITY, |dr| (dl - dr).abs())
            } else {
                f64::INFINITY
            };
            if !(diff <= threshold) {
                out.set_fixed(r, c, DisparityMap::INVALID);
            }
        }
    }
    Ok(out)
}

/// Full matcher: costs, aggregation, selection and (unless the threshold is
/// infinite) the left-right check.
pub fn compute_disparity(
    left: &GrayImage,
    right: &GrayImage,
    params: &MatcherParams,
) -> Result<DisparityMap, MatchError> {
    let costs = matching_cost(left, right, params)?;
    let aggregated = aggregate(&costs, params)?;
    drop(costs);
    let disp = select_disparity(&aggregated, params);
    if params.lr_threshold.is_infinite() {
        return Ok(disp);
    }
    lr_consistency(&disp, &right_disparity(&aggregated), params.lr_threshold)
}

/// Linear map between fixed-point disparity and 8-bit intensity:
/// `min_disparity → 1`, largest representable disparity → 255, invalid → 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityMapping {
    pub disparity_at_1: f64,
    pub disparity_at_255: f64,
}

impl IntensityMapping {
    pub fn for_range(min_disparity: i32, num_disparities: usize) -> Self {
        Self {
            disparity_at_1: min_disparity as f64,
            disparity_at_255: (min_disparity + num_disparities as i32 - 1) as f64,
        }
    }

    pub fn intensity(&self, disparity: f64) -> u8 {
        let span = self.disparity_at_255 - self.disparity_at_1;
        let t = if span > 0.0 {
            (disparity - self.disparity_at_1) / span
        } else {
            1.0
        };
        (1.0 + (254.0 * t).round()).clamp(1.0, 255.0) as u8
    }

    /// Inverse of [`Self::intensity`] (up to quantization).
    pub fn disparity(&self, intensity: u8) -> Option<f64> {
        (intensity > 0).then(|| {
            self.disparity_at_1
                + (intensity as f64 - 1.0) / 254.0 * (self.disparity_at_255 - self.disparity_at_1)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDisparity {
    pub image: GrayImage,
    pub mapping: IntensityMapping,
}

pub fn normalize_to_image(disp: &DisparityMap) -> NormalizedDisparity {
    let mapping = IntensityMapping::for_range(disp.min_disparity, disp.num_disparities);
    let data = disp
        .values
        .iter()
        .map(|&v| {
            if v == DisparityMap::INVALID {
                0
            } else {
                mapping.intensity(v as f64 / SUBPIXEL_SCALE as f64)
            }
        })
        .collect();
    NormalizedDisparity {
        image: Image::from_vec(disp.rows, disp.cols, data).expect("sized"),
        mapping,
    }
}

/// Sidecar text recording the disparity range and intensity mapping.
pub fn sidecar_text(disp: &DisparityMap) -> String {
    let mapping = IntensityMapping::for_range(disp.min_disparity, disp.num_disparities);
    let mut w = Writer::new();
    w.comment("16-bit PGM value = disparity * 16 + 1; 0 marks invalid pixels")
        .section("disparity")
        .entry("min_disparity", &[disp.min_disparity])
        .entry("num_disparities", &[disp.num_disparities])
        .entry("subpixel_scale", &[SUBPIXEL_SCALE])
        .section("normalization")
        .entry("disparity_at_1", &[mapping.disparity_at_1])
        .entry("disparity_at_255", &[mapping.disparity_at_255]);
    let mut text = w.finish();
    let _ = writeln!(text, "valid_fraction {:.6}", disp.valid_fraction());
    text
}

pub fn write_disparity(
    pgm_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
    disp: &DisparityMap,
) -> Result<(), MatchError> {
    crate::io::pnm::write_pgm16(pgm_path, &disp.to_pgm16()?)?;
    std::fs::write(sidecar_path, sidecar_text(disp)).map_err(FormatError::from)?;
    Ok(())
}

pub fn read_disparity(
    pgm_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<DisparityMap, MatchError> {
    let doc = Document::read(sidecar_path)?;
    let section = doc.require_section("disparity")?;
    let min_disparity = section.value("min_disparity")?;
    let num_disparities = section.value("num_disparities")?;
    match crate::io::pnm::read(pgm_path)? {
        crate::io::pnm::AnyGray::Gray16(img) => {
            Ok(DisparityMap::from_pgm16(&img, min_disparity, num_disparities))
        }
        crate::io::pnm::AnyGray::Gray8(_) => Err(MatchError::Format(FormatError::Unsupported(
            "disparity maps must be 16-bit PGM".into(),
        ))),
    }
}

//! Pairs LRF footprints with the stereo height and exports the resulting map.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::HeightReport;
use crate::io::pnm;
use crate::io::FormatError;
use crate::lrf::{Footprint, Pose2};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("map JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] FormatError),
}

pub const DEFAULT_ASSOCIATION_RADIUS_MM: f64 = 300.0;

/// The stereo camera's optical axis projected onto the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraAxis {
    pub origin: Point2<f64>,
    /// Radians from the map x axis.
    pub heading: f64,
}

impl Default for CameraAxis {
    /// Camera at the origin looking along +y.
    fn default() -> Self {
        Self {
            origin: Point2::origin(),
            heading: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl CameraAxis {
    /// Perpendicular distance from the axis, for points in front of the camera.
    pub fn offset(&self, p: &Point2<f64>) -> Option<f64> {
        let dir = Vector2::new(self.heading.cos(), self.heading.sin());
        let d = p - self.origin;
        let along = d.dot(&dir);
        (along > 0.0).then(|| (d - dir * along).norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub lrf_support_count: usize,
    pub disparity_valid_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sources {
    pub lrf_sweep: String,
    pub stereo_frame: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub footprint: Footprint,
    /// None when no stereo height could be associated.
    pub height_cm: Option<f64>,
    pub sources: Sources,
    pub quality: Quality,
}

/// A stereo height with the frame it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightObservation {
    pub report: HeightReport,
    pub frame: String,
    /// Share of valid disparities in the frame, when known.
    pub valid_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fusion {
    pub objects: Vec<ObjectRecord>,
    /// Heights that found no footprint within the association radius.
    pub unattached: Vec<HeightObservation>,
}

/// Attaches the height to the footprint whose centre lies closest to the
/// optical axis, if that is within `radius_mm`.
pub fn fuse(
    footprints: &[Footprint],
    height: Option<&HeightObservation>,
    axis: &CameraAxis,
    radius_mm: f64,
    sweep_id: &str,
) -> Fusion {
    let mut objects: Vec<ObjectRecord> = footprints
        .iter()
        .map(|f| ObjectRecord {
            footprint: *f,
            height_cm: None,
            sources: Sources {
                lrf_sweep: sweep_id.to_string(),
                stereo_frame: None,
            },
            quality: Quality {
                lrf_support_count: f.support_count,
                disparity_valid_fraction: None,
            },
        })
        .collect();
    let mut unattached = Vec::new();
    if let Some(h) = height {
        let best = footprints
            .iter()
            .enumerate()
            .filter_map(|(i, f)| axis.offset(&f.center).map(|d| (i, d)))
            .filter(|&(_, d)| d <= radius_mm)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, _)) => {
                let o = &mut objects[i];
                o.height_cm = Some(h.report.height_cm);
                o.sources.stereo_frame = Some(h.frame.clone());
                o.quality.disparity_valid_fraction = h.valid_fraction;
            }
            None => unattached.push(h.clone()),
        }
    }
    Fusion { objects, unattached }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapMeta {
    /// Scanner poses as `[x_mm, y_mm, heading_rad]`.
    pub sensor_poses: Vec<[f64; 3]>,
    /// Logical capture indices of the aggregated realizations.
    pub timestamps: Vec<u64>,
    pub config_hash: String,
    /// Effective configuration, section -> key -> value.
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    pub unattached_heights_cm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvironmentMap {
    pub objects: Vec<ObjectRecord>,
    /// Gated scan points in the map frame (mm).
    pub points: Vec<Point2<f64>>,
    pub meta: MapMeta,
}

#[derive(Serialize, Deserialize)]
struct ObjectJson {
    center_mm: [f64; 2],
    length_mm: f64,
    width_mm: f64,
    yaw_rad: f64,
    height_cm: Option<f64>,
    quality: Quality,
    sources: Sources,
}

#[derive(Serialize, Deserialize)]
struct MapJson {
    objects: Vec<ObjectJson>,
    points_mm: Vec<[f64; 2]>,
    meta: MapMeta,
}

impl EnvironmentMap {
    pub fn pose(&self) -> Option<Pose2> {
        self.meta.sensor_poses.first().map(|p| Pose2::new(p[0], p[1], p[2]))
    }

    pub fn to_json(&self) -> String {
        let doc = MapJson {
            objects: self
                .objects
                .iter()
                .map(|o| ObjectJson {
                    center_mm: [o.footprint.center.x, o.footprint.center.y],
                    length_mm: o.footprint.length,
                    width_mm: o.footprint.width,
                    yaw_rad: o.footprint.yaw,
                    height_cm: o.height_cm,
                    quality: o.quality.clone(),
                    sources: o.sources.clone(),
                })
                .collect(),
            points_mm: self.points.iter().map(|p| [p.x, p.y]).collect(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        let doc: MapJson = serde_json::from_str(text)?;
        Ok(Self {
            objects: doc
                .objects
                .into_iter()
                .map(|o| ObjectRecord {
                    footprint: Footprint {
                        center: Point2::new(o.center_mm[0], o.center_mm[1]),
                        length: o.length_mm,
                        width: o.width_mm,
                        yaw: o.yaw_rad,
                        support_count: o.quality.lrf_support_count,
                    },
                    height_cm: o.height_cm,
                    sources: o.sources,
                    quality: o.quality,
                })
                .collect(),
            points: doc.points_mm.iter().map(|p| Point2::new(p[0], p[1])).collect(),
            meta: doc.meta,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        std::fs::write(path, self.to_json()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        let text = std::fs::read_to_string(path).map_err(FormatError::from)?;
        Self::from_json(&text)
    }
}

// Plot

pub const PLOT_MM_PER_PX: f64 = 10.0;
pub const POINT_RGB: [u8; 3] = [128, 128, 128];
const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [190, 205, 235];
const OUTLINE: [u8; 3] = [200, 30, 30];
const TEXT: [u8; 3] = [0, 0, 0];

/// RGB raster of a map: 1 px = 10 mm, origin at the centre, +y up.
#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub rows: usize,
    pub cols: usize,
    pub rgb: Vec<u8>,
}

impl Plot {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rgb: BACKGROUND.repeat(rows * cols),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.cols + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, row: i64, col: i64, color: [u8; 3]) {
        if row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols {
            let i = 3 * (row as usize * self.cols + col as usize);
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    /// Pixel (row, col) of a map point.
    pub fn to_pixel(&self, p: &Point2<f64>) -> (i64, i64) {
        let col = (self.cols / 2) as f64 + p.x / PLOT_MM_PER_PX;
        let row = (self.rows / 2) as f64 - p.y / PLOT_MM_PER_PX;
        (row.floor() as i64, col.floor() as i64)
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let r = a.0 as f64 + t * (b.0 - a.0) as f64;
            let c = a.1 as f64 + t * (b.1 - a.1) as f64;
            self.put(r.round() as i64, c.round() as i64, color);
        }
    }

    fn text(&mut self, row: i64, col: i64, s: &str, color: [u8; 3]) {
        const SCALE: i64 = 2;
        for (k, ch) in s.chars().enumerate() {
            let glyph = glyph(ch);
            for (gy, bits) in glyph.iter().enumerate() {
                for gx in 0..3 {
                    if bits & (0b100 >> gx) != 0 {
                        for dy in 0..SCALE {
                            for dx in 0..SCALE {
                                self.put(
                                    row + gy as i64 * SCALE + dy,
                                    col + (k as i64 * 4 + gx) * SCALE + dx,
                                    color,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        pnm::encode_ppm(self.rows, self.cols, &self.rgb)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        std::fs::write(path, self.to_ppm()).map_err(FormatError::from)?;
        Ok(())
    }
}

// 3x5 glyphs, one row per entry, bit 2 = leftmost column.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 2, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'c' => [0, 7, 4, 4, 7],
        'm' => [0, 7, 7, 5, 5],
        '?' => [7, 1, 3, 0, 2],
        _ => [0; 5],
    }
}

/// Axes through the origin, footprint outlines with their height, then the
/// scan points on top.
pub fn render_plot(map: &EnvironmentMap, rows: usize, cols: usize) -> Plot {
    let mut plot = Plot::new(rows, cols);
    for c in 0..cols {
        plot.put((rows / 2) as i64, c as i64, AXIS);
    }
    for r in 0..rows {
        plot.put(r as i64, (cols / 2) as i64, AXIS);
    }
    for o in &map.objects {
        let corners = o.footprint.corners().map(|p| plot.to_pixel(&p));
        for i in 0..4 {
            plot.line(corners[i], corners[(i + 1) % 4], OUTLINE);
        }
        let label = match o.height_cm {
            Some(h) => format!("{h:.1}cm"),
            None => "?".to_string(),
        };
        let top = corners.iter().map(|c| c.0).min().unwrap_or(0);
        let left = corners.iter().map(|c| c.1).min().unwrap_or(0);
        plot.text(top - 14, left, &label, TEXT);
    }
    for p in &map.points {
        let (r, c) = plot.to_pixel(p);
        plot.put(r, c, POINT_RGB);
    }
    plot
}

pub const DEFAULT_PLOT_SIZE: usize = 640;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimension::{HeightConfig, HeightMethod};

    fn fp(x: f64, y: f64) -> Footprint {
        Footprint {
            center: Point2::new(x, y),
            length: 300.0,
            width: 4.0,
            yaw: 0.0,
            support_count: 25,
        }
    }

    fn height(cm: f64) -> HeightObservation {
        HeightObservation {
            report: HeightReport {
                height_cm: cm,
                height_px: 0,
                r_top: 0,
                threshold: Some(250),
                method: HeightMethod::MaxIntensity,
                degenerate: false,
                geometry: HeightConfig::default(),
            },
            frame: "frame0".into(),
            valid_fraction: Some(0.6),
        }
    }

    #[test]
    fn on_axis_footprint_gets_height() {
        let f = fuse(&[fp(10.0, 850.0)], Some(&height(30.0)), &CameraAxis::default(), 300.0, "s0");
        assert_eq!(f.objects.len(), 1);
        assert_eq!(f.objects[0].height_cm, Some(30.0));
        assert_eq!(f.objects[0].quality.disparity_valid_fraction, Some(0.6));
        assert!(f.unattached.is_empty());
    }

    #[test]
    fn far_footprint_stays_unknown() {
        let f = fuse(&[fp(2000.0, 850.0)], Some(&height(30.0)), &CameraAxis::default(), 300.0, "s0");
        assert_eq!(f.objects[0].height_cm, None);
        assert_eq!(f.unattached.len(), 1);
        // behind the camera never associates
        let f = fuse(&[fp(0.0, -850.0)], Some(&height(30.0)), &CameraAxis::default(), 300.0, "s0");
        assert_eq!(f.objects[0].height_cm, None);
    }

    #[test]
    fn nearest_to_axis_wins() {
        let f = fuse(&[fp(200.0, 900.0), fp(-50.0, 2000.0)], Some(&height(30.0)), &CameraAxis::default(), 300.0, "s");
        assert_eq!(f.objects[0].height_cm, None);
        assert_eq!(f.objects[1].height_cm, Some(30.0));
    }

    #[test]
    fn json_round_trip_and_empty() {
        let empty = EnvironmentMap::default();
        let text = empty.to_json();
        assert!(text.contains("\"objects\": []") && text.contains("\"points_mm\": []"));
        assert_eq!(EnvironmentMap::from_json(&text).unwrap(), empty);

        let f = fuse(&[fp(1.5, 850.25)], Some(&height(30.044)), &CameraAxis::default(), 300.0, "s0");
        let map = EnvironmentMap {
            objects: f.objects,
            points: vec![Point2::new(0.1, 700.3), Point2::new(-1.0 / 3.0, 2.0f64.sqrt())],
            meta: MapMeta {
                sensor_poses: vec![[0.0, 0.0, 0.0]],
                config_hash: "abc".into(),
                ..Default::default()
            },
        };
        let back = EnvironmentMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
        assert!(map.to_json().contains("\"height_cm\": 30.044"));
    }

    #[test]
    fn plot_marks_points() {
        let blank = render_plot(&EnvironmentMap::default(), 100, 120);
        assert_eq!(blank.pixel(50, 60), AXIS);
        assert_eq!(blank.pixel(10, 10), BACKGROUND);
        let map = EnvironmentMap {
            points: vec![Point2::new(105.0, 0.0), Point2::new(0.0, 200.0)],
            ..Default::default()
        };
        let plot = render_plot(&map, 100, 120);
        assert_eq!(plot.pixel(50, 70), POINT_RGB);
        assert_eq!(plot.pixel(30, 60), POINT_RGB);
        assert!(plot.to_ppm().starts_with(b"P6\n120 100\n255\n"));
    }
}

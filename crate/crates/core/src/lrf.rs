//! Spinning laser range finder: 22-byte packet codec, stream resync, sweep
//! assembly, median aggregation over realizations, range gating, and
//! footprint rectangles for object clusters.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Point2, Vector2};
use thiserror::Error;

use crate::io::FormatError;

pub const PACKET_LEN: usize = 22;
pub const START_BYTE: u8 = 0xFA;
pub const FIRST_INDEX: u8 = 0xA0;
pub const LAST_INDEX: u8 = 0xF9;
pub const SLOTS: usize = 360;
pub const DEFAULT_MAX_RANGE_MM: u16 = 3000;
/// Largest distance the 14-bit field can carry.
pub const MAX_ENCODABLE_MM: u16 = 0x3FFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("packet must be {PACKET_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("packet starts with {0:#04x} instead of 0xFA")]
    BadStart(u8),
    #[error("packet index {0:#04x} outside 0xA0..=0xF9")]
    BadIndex(u8),
}

#[derive(Debug, Error)]
pub enum LrfError {
    #[error("no sweeps to aggregate")]
    NoSweeps,
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Reading {
    /// Absent when the invalid flag is set.
    pub distance_mm: Option<u16>,
    pub strength: u16,
    pub strength_warning: bool,
}

impl Reading {
    pub fn invalid(&self) -> bool {
        self.distance_mm.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LrfPacket {
    pub index: u8,
    /// Motor speed in 1/64 rpm.
    pub speed: u16,
    pub readings: [Reading; 4],
    pub checksum_ok: bool,
}

impl LrfPacket {
    pub fn rpm(&self) -> f64 {
        self.speed as f64 / 64.0
    }

    /// First angle (degrees) covered by this packet.
    pub fn first_angle(&self) -> usize {
        4 * (self.index - FIRST_INDEX) as usize
    }
}

/// Ten little-endian words folded as `c = (c << 1) + w`, then reduced to 15 bits.
pub fn checksum(bytes: &[u8; 20]) -> u16 {
    let mut c: u32 = 0;
    for w in bytes.chunks_exact(2) {
        c = (c << 1).wrapping_add(u16::from_le_bytes([w[0], w[1]]) as u32);
    }
    (((c & 0x7FFF) + (c >> 15)) & 0x7FFF) as u16
}

/// Serializes a packet; the checksum is always computed, `checksum_ok` is ignored.
pub fn encode_packet(p: &LrfPacket) -> [u8; PACKET_LEN] {
    let mut b = [0u8; PACKET_LEN];
    b[0] = START_BYTE;
    b[1] = p.index;
    b[2..4].copy_from_slice(&p.speed.to_le_bytes());
    for (i, r) in p.readings.iter().enumerate() {
        let o = 4 + 4 * i;
        let d = r.distance_mm.unwrap_or(0).min(MAX_ENCODABLE_MM);
        b[o] = (d & 0xFF) as u8;
        b[o + 1] = ((d >> 8) as u8 & 0x3F)
            | if r.invalid() { 0x80 } else { 0 }
            | if r.strength_warning { 0x40 } else { 0 };
        b[o + 2..o + 4].copy_from_slice(&r.strength.to_le_bytes());
    }
    let body: &[u8; 20] = b[..20].try_into().expect("20 bytes");
    let chk = checksum(body);
    b[20..22].copy_from_slice(&chk.to_le_bytes());
    b
}

pub fn decode_packet(bytes: &[u8]) -> Result<LrfPacket, PacketError> {
    if bytes.len() != PACKET_LEN {
        return Err(PacketError::BadLength(bytes.len()));
    }
    if bytes[0] != START_BYTE {
        return Err(PacketError::BadStart(bytes[0]));
    }
    let index = bytes[1];
    if !(FIRST_INDEX..=LAST_INDEX).contains(&index) {
        return Err(PacketError::BadIndex(index));
    }
    let mut readings = [Reading::default(); 4];
    for (i, r) in readings.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        let (b0, b1) = (bytes[o], bytes[o + 1]);
        let distance = b0 as u16 | ((b1 & 0x3F) as u16) << 8;
        *r = Reading {
            distance_mm: (b1 & 0x80 == 0).then_some(distance),
            strength: u16::from_le_bytes([bytes[o + 2], bytes[o + 3]]),
            strength_warning: b1 & 0x40 != 0,
        };
    }
    let body: &[u8; 20] = bytes[..20].try_into().expect("20 bytes");
    Ok(LrfPacket {
        index,
        speed: u16::from_le_bytes([bytes[2], bytes[3]]),
        readings,
        checksum_ok: checksum(body) == u16::from_le_bytes([bytes[20], bytes[21]]),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamDecode {
    /// Checksum-verified packets in stream order.
    pub packets: Vec<LrfPacket>,
    /// Candidate blocks at a start byte that failed to decode or verify.
    pub rejected: usize,
    /// Bytes stepped over while searching for a start byte.
    pub skipped_bytes: usize,
}

/// Splits a raw byte stream into packets. On any error, including a checksum
/// mismatch, advances one byte and searches for the next start byte.
pub fn decode_stream(bytes: &[u8]) -> StreamDecode {
    let mut out = StreamDecode::default();
    let mut i = 0;
    while i + PACKET_LEN <= bytes.len() {
        if bytes[i] != START_BYTE {
            i += 1;
            out.skipped_bytes += 1;
            continue;
        }
        match decode_packet(&bytes[i..i + PACKET_LEN]) {
            Ok(p) if p.checksum_ok => {
                out.packets.push(p);
                i += PACKET_LEN;
            }
            _ => {
                out.rejected += 1;
                i += 1;
            }
        }
    }
    out.skipped_bytes += bytes.len() - i;
    out
}

/// One revolution: 360 whole-degree slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LrfSweep {
    pub ranges: [Option<u16>; SLOTS],
    pub strengths: [u16; SLOTS],
    pub warnings: [bool; SLOTS],
    pub rpm_mean: f64,
    /// Packets whose index had already been seen.
    pub duplicates: usize,
}

impl Default for LrfSweep {
    fn default() -> Self {
        Self::empty()
    }
}

impl LrfSweep {
    pub fn empty() -> Self {
        Self {
            ranges: [None; SLOTS],
            strengths: [0; SLOTS],
            warnings: [false; SLOTS],
            rpm_mean: 0.0,
            duplicates: 0,
        }
    }

    pub fn from_ranges(ranges: [Option<u16>; SLOTS]) -> Self {
        Self { ranges, ..Self::empty() }
    }

    pub fn coverage(&self) -> usize {
        self.ranges.iter().filter(|r| r.is_some()).count()
    }

    pub fn missing(&self) -> usize {
        SLOTS - self.coverage()
    }
}

pub fn assemble_sweep<'a>(packets: impl IntoIterator<Item = &'a LrfPacket>) -> LrfSweep {
    let mut sweep = LrfSweep::empty();
    let mut seen = [false; (LAST_INDEX - FIRST_INDEX) as usize + 1];
    let (mut rpm_sum, mut n) = (0.0, 0usize);
    for p in packets.into_iter().filter(|p| p.checksum_ok) {
        let k = (p.index - FIRST_INDEX) as usize;
        if seen[k] {
            sweep.duplicates += 1;
        }
        seen[k] = true;
        rpm_sum += p.rpm();
        n += 1;
        for (slot, r) in p.readings.iter().enumerate() {
            let a = p.first_angle() + slot;
            sweep.ranges[a] = r.distance_mm;
            sweep.strengths[a] = r.strength;
            sweep.warnings[a] = r.strength_warning;
        }
    }
    if n > 0 {
        sweep.rpm_mean = rpm_sum / n as f64;
    }
    sweep
}

/// Splits a packet sequence into revolutions: a new one starts whenever the
/// index goes down. Repeated indices stay in the current revolution.
pub fn split_sweeps(packets: &[LrfPacket]) -> Vec<&[LrfPacket]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..packets.len() {
        if packets[i].index < packets[i - 1].index {
            out.push(&packets[start..i]);
            start = i;
        }
    }
    if start < packets.len() {
        out.push(&packets[start..]);
    }
    out
}

pub const DEFAULT_MIN_REALIZATIONS: usize = 3;

fn lower_median<T: Ord + Copy>(v: &mut [T]) -> T {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Per-angle median of the available readings; angles seen in fewer than
/// `min_realizations` sweeps become missing. Even counts take the lower median.
pub fn aggregate_realizations(sweeps: &[LrfSweep], min_realizations: usize) -> Result<LrfSweep, LrfError> {
    if sweeps.is_empty() {
        return Err(LrfError::NoSweeps);
    }
    let mut out = LrfSweep::empty();
    for a in 0..SLOTS {
        let mut ranges: Vec<u16> = sweeps.iter().filter_map(|s| s.ranges[a]).collect();
        if ranges.is_empty() || ranges.len() < min_realizations {
            continue;
        }
        let mut strengths: Vec<u16> = sweeps
            .iter()
            .filter(|s| s.ranges[a].is_some())
            .map(|s| s.strengths[a])
            .collect();
        out.ranges[a] = Some(lower_median(&mut ranges));
        out.strengths[a] = lower_median(&mut strengths);
        out.warnings[a] = sweeps.iter().any(|s| s.ranges[a].is_some() && s.warnings[a]);
    }
    out.rpm_mean = sweeps.iter().map(|s| s.rpm_mean).sum::<f64>() / sweeps.len() as f64;
    out.duplicates = sweeps.iter().map(|s| s.duplicates).sum();
    Ok(out)
}

/// Drops zero readings and readings beyond `max_mm`.
pub fn range_gate(sweep: &LrfSweep, max_mm: u16) -> LrfSweep {
    let mut out = sweep.clone();
    for r in out.ranges.iter_mut() {
        if matches!(*r, Some(d) if d == 0 || d > max_mm) {
            *r = None;
        }
    }
    out
}

/// Sensor position (mm) and heading (radians) in the map frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

/// Map-frame points in increasing angle order.
pub fn to_points(sweep: &LrfSweep, pose: &Pose2) -> Vec<Point2<f64>> {
    sweep
        .ranges
        .iter()
        .enumerate()
        .filter_map(|(a, r)| {
            let r = (*r)? as f64;
            let phi = (a as f64).to_radians() + pose.theta;
            Some(Point2::new(pose.x + r * phi.cos(), pose.y + r * phi.sin()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintParams {
    pub gap_mm: f64,
    pub min_points: usize,
}

impl Default for FootprintParams {
    fn default() -> Self {
        Self {
            gap_mm: 120.0,
            min_points: 5,
        }
    }
}

/// Oriented rectangle on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub center: Point2<f64>,
    pub length: f64,
    pub width: f64,
    /// Direction of the long side, in (-pi/2, pi/2].
    pub yaw: f64,
    pub support_count: usize,
}

/// Thin clusters (a single visible face) still get a nonzero width.
pub const MIN_WIDTH_MM: f64 = 1.0;

impl Footprint {
    /// Long-side and short-side unit axes.
    pub fn axes(&self) -> (Vector2<f64>, Vector2<f64>) {
        let u = Vector2::new(self.yaw.cos(), self.yaw.sin());
        (u, Vector2::new(-u.y, u.x))
    }

    pub fn corners(&self) -> [Point2<f64>; 4] {
        let (u, v) = self.axes();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [
            self.center + u * hl + v * hw,
            self.center - u * hl + v * hw,
            self.center - u * hl - v * hw,
            self.center + u * hl - v * hw,
        ]
    }

    pub fn contains(&self, p: &Point2<f64>, slack: f64) -> bool {
        let (u, v) = self.axes();
        let d = p - self.center;
        d.dot(&u).abs() <= 0.5 * self.length + slack && d.dot(&v).abs() <= 0.5 * self.width + slack
    }
}

fn cross(o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise hull without collinear points (monotone chain).
pub fn convex_hull(points: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle by testing every hull edge direction.
pub fn min_area_rect(points: &[Point2<f64>]) -> Option<Footprint> {
    let hull = convex_hull(points);
    let first = *hull.first()?;
    let mut dirs: Vec<Vector2<f64>> = (0..hull.len())
        .filter_map(|i| {
            let e = hull[(i + 1) % hull.len()] - hull[i];
            (e.norm() > 0.0).then(|| e.normalize())
        })
        .collect();
    if dirs.is_empty() {
        dirs.push(Vector2::x());
    }
    let mut best: Option<(f64, Footprint)> = None;
    for u in dirs {
        let v = Vector2::new(-u.y, u.x);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let d = p - first;
            let (a, b) = (d.dot(&u), d.dot(&v));
            u0 = u0.min(a);
            u1 = u1.max(a);
            v0 = v0.min(b);
            v1 = v1.max(b);
        }
        let area = (u1 - u0) * (v1 - v0);
        if best.as_ref().is_some_and(|(a, _)| *a <= area) {
            continue;
        }
        let center = first + u * (0.5 * (u0 + u1)) + v * (0.5 * (v0 + v1));
        let (mut length, mut width, mut axis) = (u1 - u0, v1 - v0, u);
        if width > length {
            std::mem::swap(&mut length, &mut width);
            axis = v;
        }
        let mut yaw = axis.y.atan2(axis.x);
        if yaw > PI / 2.0 {
            yaw -= PI;
        } else if yaw <= -PI / 2.0 {
            yaw += PI;
        }
        let fp = Footprint {
            center,
            length,
            width: width.max(MIN_WIDTH_MM),
            yaw,
            support_count: points.len(),
        };
        best = Some((area, fp));
    }
    best.map(|(_, f)| f)
}

/// Orders points by bearing from `viewpoint`, splits them where consecutive
/// points are more than `gap_mm` apart (closing the circle), and fits a
/// rectangle to every cluster with at least `min_points` points.
pub fn extract_footprints(
    points: &[Point2<f64>],
    viewpoint: &Point2<f64>,
    params: &FootprintParams,
) -> Vec<Footprint> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut ordered: Vec<(f64, Point2<f64>)> = points
        .iter()
        .map(|p| ((p.y - viewpoint.y).atan2(p.x - viewpoint.x), *p))
        .collect();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pts: Vec<Point2<f64>> = ordered.into_iter().map(|(_, p)| p).collect();

    let mut clusters: Vec<Vec<Point2<f64>>> = vec![vec![pts[0]]];
    for w in pts.windows(2) {
        if (w[1] - w[0]).norm() > params.gap_mm {
            clusters.push(Vec::new());
        }
        clusters.last_mut().expect("nonempty").push(w[1]);
    }
    if clusters.len() > 1 && (pts[0] - pts[pts.len() - 1]).norm() <= params.gap_mm {
        let last = clusters.pop().expect("len > 1");
        clusters[0].extend(last);
    }
    clusters
        .iter()
        .filter(|c| c.len() >= params.min_points.max(1))
        .filter_map(|c| min_area_rect(c))
        .collect()
}

pub fn sweep_to_csv(sweep: &LrfSweep) -> String {
    let mut s = String::from("angle_deg,distance_mm,strength,flags\n");
    for a in 0..SLOTS {
        let flags = match (sweep.ranges[a].is_none(), sweep.warnings[a]) {
            (true, true) => "missing|warning",
            (true, false) => "missing",
            (false, true) => "warning",
            (false, false) => "",
        };
        let d = sweep.ranges[a].map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{a},{d},{},{flags}", sweep.strengths[a]);
    }
    s
}

pub fn sweep_from_csv(text: &str) -> Result<LrfSweep, FormatError> {
    let mut sweep = LrfSweep::empty();
    for (n, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: &str| FormatError::Syntax {
            line: n + 1,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err("expected 4 fields"));
        }
        let a: usize = fields[0].parse().map_err(|_| err("bad angle"))?;
        if a >= SLOTS {
            return Err(err("angle out of range"));
        }
        sweep.ranges[a] = if fields[1].is_empty() {
            None
        } else {
            Some(fields[1].parse().map_err(|_| err("bad distance"))?)
        };
        sweep.strengths[a] = fields[2].parse().map_err(|_| err("bad strength"))?;
        sweep.warnings[a] = fields[3].contains("warning");
    }
    Ok(sweep)
}

pub fn points_to_csv(points: &[Point2<f64>]) -> String {
    let mut s = String::from("x_mm,y_mm\n");
    for p in points {
        let _ = writeln!(s, "{:.3},{:.3}", p.x, p.y);
    }
    s
}

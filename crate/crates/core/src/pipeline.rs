//! End-to-end run: rectify -> disparity -> dilate -> height on the stereo
//! side, decode -> aggregate -> gate -> points -> footprints on the scan
//! side, then fusion into an [`EnvironmentMap`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::camera::remap_image;
use crate::dimension::{self, HeightConfig, HeightReport};
use crate::fusion::{self, CameraAxis, EnvironmentMap, HeightObservation, MapMeta};
use crate::image::GrayImage;
use crate::io::kv::{Document, Section, Writer};
use crate::io::{pnm, FormatError};
use crate::lrf::{self, FootprintParams, Footprint, LrfSweep, Pose2};
use crate::morph::{self, StructuringElement};
use crate::par;
use crate::scene::{self, SceneSpec};
use crate::sgm::{self, DisparityMap, MatcherParams};
use crate::stereo::{build_rectification, StereoRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synthesize,
    Rectify,
    Disparity,
    Dilate,
    Height,
    Decode,
    Aggregate,
    Footprints,
    Fuse,
    Export,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Synthesize => "synthesize",
            Stage::Rectify => "rectify",
            Stage::Disparity => "disparity",
            Stage::Dilate => "dilate",
            Stage::Height => "height",
            Stage::Decode => "decode",
            Stage::Aggregate => "aggregate",
            Stage::Footprints => "footprints",
            Stage::Fuse => "fuse",
            Stage::Export => "export",
        }
    }
}

/// What went wrong, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The configuration itself is malformed.
    Config,
    /// An input file is missing or unreadable.
    Input,
    /// A stage rejected otherwise well-formed data.
    Failure,
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            stage,
            kind,
            source: source.into(),
        }
    }
}

fn failed<E: Into<Box<dyn std::error::Error + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Failure, e)
}

fn input<E: Into<Box<dyn std::error::Error + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Input, e)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// Render the stereo pair and encode the packet stream from a scene.
    Synthetic(SceneSpec),
    Files {
        left: PathBuf,
        right: PathBuf,
        calibration: PathBuf,
        packets: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    pub matcher: MatcherParams,
    /// None skips dilation.
    pub dilation: Option<(StructuringElement, usize)>,
    pub height: HeightConfig,
    pub delta: u8,
    pub max_range_mm: u16,
    pub min_realizations: usize,
    pub footprints: FootprintParams,
    pub scan_pose: Pose2,
    pub camera_axis: CameraAxis,
    pub association_radius_mm: f64,
}

impl PipelineConfig {
    pub fn synthetic(scene: SceneSpec) -> Self {
        Self {
            scan_pose: scene.lrf.pose,
            inputs: Inputs::Synthetic(scene),
            matcher: MatcherParams::default(),
            dilation: Some((StructuringElement::default(), 1)),
            height: HeightConfig::default(),
            delta: morph::DEFAULT_DELTA,
            max_range_mm: lrf::DEFAULT_MAX_RANGE_MM,
            min_realizations: lrf::DEFAULT_MIN_REALIZATIONS,
            footprints: FootprintParams::default(),
            camera_axis: CameraAxis::default(),
            association_radius_mm: fusion::DEFAULT_ASSOCIATION_RADIUS_MM,
        }
    }

    /// Parses a pipeline file. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, FormatError> {
        let doc = Document::parse(text)?;
        let empty = Section::default();
        let sec = |name: &str| doc.section(name).unwrap_or(&empty);

        let inp = sec("input");
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let inputs = match inp.string_opt("scene") {
            Some(s) if s == "default" => Inputs::Synthetic(SceneSpec::default()),
            // scene sections live in this same file
            Some(s) if s == "inline" => Inputs::Synthetic(SceneSpec::from_document(&doc)?),
            Some(path) => {
                let path = resolve(path);
                let text = std::fs::read_to_string(&path)?;
                Inputs::Synthetic(SceneSpec::parse(&text)?)
            }
            None => Inputs::Files {
                left: resolve(inp.string("left")?),
                right: resolve(inp.string("right")?),
                calibration: resolve(inp.string("calibration")?),
                packets: inp.values::<String>("packets")?.into_iter().map(resolve).collect(),
            },
        };
        let mut cfg = match &inputs {
            Inputs::Synthetic(s) => Self::synthetic(s.clone()),
            Inputs::Files { .. } => Self {
                scan_pose: Pose2::default(),
                ..Self::synthetic(SceneSpec::default())
            },
        };
        cfg.inputs = inputs;

        let m = sec("matcher");
        let block = m.value_or("block_size", cfg.matcher.block_size)?;
        let base = MatcherParams::with_block_size(block);
        cfg.matcher = MatcherParams {
            block_size: block,
            num_disparities: m.value_or("num_disparities", base.num_disparities)?,
            min_disparity: m.value_or("min_disparity", base.min_disparity)?,
            penalty_small: m.value_or("penalty_small", base.penalty_small)?,
            penalty_large: m.value_or("penalty_large", base.penalty_large)?,
            paths: m.value_or("paths", base.paths)?,
            lr_threshold: m.value_or("lr_threshold", base.lr_threshold)?,
            uniqueness_ratio: m.value_or("uniqueness_ratio", base.uniqueness_ratio)?,
        };

        let d = sec("dilate");
        if d.flag_or("enabled", true)? {
            let [w, h] = if d.has("kernel") { d.array("kernel")? } else { [5usize, 5] };
            let kernel = StructuringElement::new(w, h).map_err(|e| FormatError::Value {
                key: "kernel".into(),
                message: e.to_string(),
            })?;
            cfg.dilation = Some((kernel, d.value_or("iterations", 1usize)?));
        } else {
            cfg.dilation = None;
        }

        let h = sec("height");
        cfg.height = HeightConfig {
            ground_offset_px: h.value_or("ground_offset_px", cfg.height.ground_offset_px)?,
            cm_per_px: h.value_or("cm_per_px", cfg.height.cm_per_px)?,
            camera_height_cm: h.value_or("camera_height_cm", cfg.height.camera_height_cm)?,
            working_distance_m: h.value_or("working_distance_m", cfg.height.working_distance_m)?,
        };
        cfg.delta = h.value_or("delta", cfg.delta)?;

        let s = sec("scan");
        cfg.max_range_mm = s.value_or("max_range_mm", cfg.max_range_mm)?;
        cfg.min_realizations = s.value_or("min_realizations", cfg.min_realizations)?;
        cfg.footprints = FootprintParams {
            gap_mm: s.value_or("gap_mm", cfg.footprints.gap_mm)?,
            min_points: s.value_or("min_points", cfg.footprints.min_points)?,
        };
        if s.has("pose") {
            let [x, y, heading] = s.array::<f64, 3>("pose")?;
            cfg.scan_pose = Pose2::new(x, y, heading.to_radians());
        }

        let f = sec("fusion");
        cfg.association_radius_mm = f.value_or("association_radius_mm", cfg.association_radius_mm)?;
        if f.has("camera_pose") {
            let [x, y, heading] = f.array::<f64, 3>("camera_pose")?;
            cfg.camera_axis = CameraAxis {
                origin: nalgebra::Point2::new(x, y),
                heading: heading.to_radians(),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |key: &str, e: &dyn fmt::Display| FormatError::Value {
            key: key.into(),
            message: e.to_string(),
        };
        self.matcher.validate().map_err(|e| bad("matcher", &e))?;
        self.height.validate().map_err(|e| bad("height", &e))?;
        if matches!(self.dilation, Some((_, 0))) {
            return Err(bad("iterations", &"must be at least 1"));
        }
        if !(self.association_radius_mm >= 0.0) {
            return Err(bad("association_radius_mm", &"must be non-negative"));
        }
        Ok(())
    }

    /// Canonical form with every effective value spelled out.
    pub fn to_text(&self) -> String {
        let mut w = Writer::new();
        w.section("input");
        match &self.inputs {
            Inputs::Synthetic(_) => {
                w.entry("scene", &["inline"]);
            }
            Inputs::Files { left, right, calibration, packets } => {
                w.entry("left", &[left.display()])
                    .entry("right", &[right.display()])
                    .entry("calibration", &[calibration.display()])
                    .entry("packets", &packets.iter().map(|p| p.display()).collect::<Vec<_>>());
            }
        }
        let m = &self.matcher;
        w.section("matcher")
            .entry("block_size", &[m.block_size])
            .entry("num_disparities", &[m.num_disparities])
            .entry("min_disparity", &[m.min_disparity])
            .entry("penalty_small", &[m.penalty_small])
            .entry("penalty_large", &[m.penalty_large])
            .entry("paths", &[m.paths])
            .entry("lr_threshold", &[m.lr_threshold])
            .entry("uniqueness_ratio", &[m.uniqueness_ratio]);
        w.section("dilate");
        match self.dilation {
            Some((k, it)) => {
                w.entry("enabled", &[true])
                    .entry("kernel", &[k.width(), k.height()])
                    .entry("iterations", &[it]);
            }
            None => {
                w.entry("enabled", &[false]);
            }
        }
        let h = &self.height;
        w.section("height")
            .entry("ground_offset_px", &[h.ground_offset_px])
            .entry("cm_per_px", &[h.cm_per_px])
            .entry("camera_height_cm", &[h.camera_height_cm])
            .entry("working_distance_m", &[h.working_distance_m])
            .entry("delta", &[self.delta]);
        let p = &self.scan_pose;
        w.section("scan")
            .entry("max_range_mm", &[self.max_range_mm])
            .entry("min_realizations", &[self.min_realizations])
            .entry("gap_mm", &[self.footprints.gap_mm])
            .entry("min_points", &[self.footprints.min_points])
            .entry("pose", &[p.x, p.y, p.theta.to_degrees()]);
        let a = &self.camera_axis;
        w.section("fusion")
            .entry("association_radius_mm", &[self.association_radius_mm])
            .entry("camera_pose", &[a.origin.x, a.origin.y, a.heading.to_degrees()]);
        let mut text = w.finish();
        if let Inputs::Synthetic(s) = &self.inputs {
            text.push_str("\n# scene\n");
            text.push_str(&s.to_text());
        }
        text
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn config_table(text: &str) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    if let Ok(doc) = Document::parse(text) {
        // repeated sections get an index suffix
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for s in doc.sections.iter().filter(|s| !s.entries.is_empty()) {
            let n = seen.entry(s.name.clone()).or_default();
            let name = if *n == 0 { s.name.clone() } else { format!("{}.{}", s.name, n) };
            *n += 1;
            let table = out.entry(name).or_default();
            for e in &s.entries {
                table.insert(e.key.clone(), e.values.join(" "));
            }
        }
    }
    out
}

/// Intermediate products of a run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: EnvironmentMap,
    pub rectified: (GrayImage, GrayImage),
    pub disparity: DisparityMap,
    pub disparity_image: GrayImage,
    /// The image the height scan ran on (dilated unless dilation is off).
    pub height_input: GrayImage,
    pub height: HeightReport,
    pub sweeps: Vec<LrfSweep>,
    pub aggregated: LrfSweep,
    pub footprints: Vec<Footprint>,
}

struct StereoProducts {
    rectified: (GrayImage, GrayImage),
    disparity: DisparityMap,
    disparity_image: GrayImage,
    height_input: GrayImage,
    height: HeightReport,
}

/// Everything the scan side produces from raw packet streams.
#[derive(Debug, Clone)]
pub struct ScanProducts {
    /// One entry per decoded revolution, in stream order.
    pub sweeps: Vec<LrfSweep>,
    /// Aggregated and range-gated.
    pub aggregated: LrfSweep,
    pub points: Vec<nalgebra::Point2<f64>>,
    pub footprints: Vec<Footprint>,
}

/// A rectified pair plus the sign relating rectified x offsets to disparity.
#[derive(Debug, Clone)]
pub struct RectifiedPair {
    pub left: GrayImage,
    pub right: GrayImage,
    pub disparity_sign: f64,
}

/// Warps both views onto the common rectified plane.
pub fn rectify_pair(rig: &StereoRig, left: &GrayImage, right: &GrayImage) -> Result<RectifiedPair, PipelineError> {
    if (left.rows(), left.cols()) != (right.rows(), right.cols()) {
        return Err(PipelineError::new(
            Stage::Rectify,
            ErrorKind::Input,
            format!(
                "image sizes differ: {}x{} vs {}x{}",
                left.rows(),
                left.cols(),
                right.rows(),
                right.cols()
            ),
        ));
    }
    let maps = build_rectification(rig, left.rows(), left.cols()).map_err(failed(Stage::Rectify))?;
    Ok(RectifiedPair {
        left: remap_image(left, &maps.left_map),
        right: remap_image(right, &maps.right_map),
        disparity_sign: maps.disparity_sign,
    })
}

/// Runs the matcher with the reference view on the -x side of the rig, so
/// disparities come out positive whichever way round the cameras sit.
pub fn match_pair(pair: &RectifiedPair, params: &MatcherParams) -> Result<DisparityMap, PipelineError> {
    let (reference, other) = if pair.disparity_sign > 0.0 {
        (&pair.left, &pair.right)
    } else {
        (&pair.right, &pair.left)
    };
    sgm::compute_disparity(reference, other, params).map_err(failed(Stage::Disparity))
}

fn stereo_branch(
    cfg: &PipelineConfig,
    pair: (GrayImage, GrayImage),
    rig: &StereoRig,
) -> Result<StereoProducts, PipelineError> {
    let rectified = rectify_pair(rig, &pair.0, &pair.1)?;
    let disparity = match_pair(&rectified, &cfg.matcher)?;
    let disparity_image = sgm::normalize_to_image(&disparity).image;

    let height_input = match cfg.dilation {
        Some((kernel, iterations)) => {
            morph::dilate(&disparity_image, kernel, iterations).map_err(failed(Stage::Dilate))?
        }
        None => disparity_image.clone(),
    };
    let height = dimension::height_from_disparity(&height_input, &cfg.height, cfg.delta)
        .map_err(failed(Stage::Height))?;
    Ok(StereoProducts {
        rectified: (rectified.left, rectified.right),
        disparity,
        disparity_image,
        height_input,
        height,
    })
}

/// Decode -> aggregate -> gate -> points -> footprints.
pub fn process_scans(cfg: &PipelineConfig, streams: &[Vec<u8>]) -> Result<ScanProducts, PipelineError> {
    let mut sweeps = Vec::new();
    for bytes in streams {
        let decoded = lrf::decode_stream(bytes);
        for rev in lrf::split_sweeps(&decoded.packets) {
            sweeps.push(lrf::assemble_sweep(rev));
        }
    }
    let aggregated = if sweeps.is_empty() {
        LrfSweep::empty()
    } else {
        lrf::aggregate_realizations(&sweeps, cfg.min_realizations).map_err(failed(Stage::Aggregate))?
    };
    let gated = lrf::range_gate(&aggregated, cfg.max_range_mm);
    let points = lrf::to_points(&gated, &cfg.scan_pose);
    let footprints = lrf::extract_footprints(&points, &cfg.scan_pose.position(), &cfg.footprints);
    Ok(ScanProducts {
        sweeps,
        aggregated: gated,
        points,
        footprints,
    })
}

pub fn read_image(path: &Path) -> Result<GrayImage, PipelineError> {
    pnm::read_gray8(path).map_err(input(Stage::Rectify))
}

/// The raw stereo pair and its rig, rendered for synthetic inputs.
pub fn stereo_inputs(inputs: &Inputs) -> Result<((GrayImage, GrayImage), StereoRig), PipelineError> {
    match inputs {
        Inputs::Synthetic(scene) => {
            let rendered = scene::render_stereo(scene);
            let rig = scene.camera.rig().map_err(failed(Stage::Synthesize))?;
            Ok(((rendered.left, rendered.right), rig))
        }
        Inputs::Files { left, right, calibration, .. } => {
            let rig = StereoRig::read_calibration(calibration).map_err(input(Stage::Rectify))?;
            Ok(((read_image(left)?, read_image(right)?), rig))
        }
    }
}

/// Raw packet streams, one per file, or the encoded realizations of a scene.
pub fn packet_streams(inputs: &Inputs) -> Result<Vec<Vec<u8>>, PipelineError> {
    match inputs {
        Inputs::Synthetic(scene) => {
            let sweeps = scene::raycast_sweep(scene, &scene.noise, scene.realizations, scene.seed);
            Ok(vec![sweeps.iter().flat_map(|s| scene::encode_packets(s, scene.rpm)).collect()])
        }
        Inputs::Files { packets, .. } => packets
            .iter()
            .map(|p| std::fs::read(p).map_err(|e| input(Stage::Decode)(FormatError::from(e))))
            .collect(),
    }
}

/// Map metadata for a run of `cfg` that decoded `sweeps` revolutions.
pub fn map_meta(cfg: &PipelineConfig, sweeps: usize, unattached_heights_cm: Vec<f64>) -> MapMeta {
    let p = cfg.scan_pose;
    MapMeta {
        sensor_poses: vec![[p.x, p.y, p.theta]],
        timestamps: (0..sweeps as u64).collect(),
        config_hash: cfg.hash(),
        config: config_table(&cfg.to_text()),
        unattached_heights_cm,
    }
}

/// Runs every stage. With `intermediates` set, each stage's product is
/// written into that directory.
pub fn run_pipeline(cfg: &PipelineConfig, intermediates: Option<&Path>) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::new(Stage::Config, ErrorKind::Config, e))?;

    let (pair, rig) = stereo_inputs(&cfg.inputs)?;
    let streams = packet_streams(&cfg.inputs)?;

    let (stereo, scan) = par::join(|| stereo_branch(cfg, pair, &rig), || process_scans(cfg, &streams));
    let (stereo, scan) = (stereo?, scan?);

    let observation = HeightObservation {
        report: stereo.height.clone(),
        frame: "frame0".into(),
        valid_fraction: Some(stereo.disparity.valid_fraction()),
    };
    let fused = fusion::fuse(
        &scan.footprints,
        Some(&observation),
        &cfg.camera_axis,
        cfg.association_radius_mm,
        "sweep0",
    );
    let map = EnvironmentMap {
        objects: fused.objects,
        points: scan.points,
        meta: map_meta(cfg, scan.sweeps.len(), fused.unattached.iter().map(|h| h.report.height_cm).collect()),
    };

    let out = PipelineOutput {
        map,
        rectified: stereo.rectified,
        disparity: stereo.disparity,
        disparity_image: stereo.disparity_image,
        height_input: stereo.height_input,
        height: stereo.height,
        sweeps: scan.sweeps,
        aggregated: scan.aggregated,
        footprints: scan.footprints,
    };
    if let Some(dir) = intermediates {
        write_intermediates(&out, dir).map_err(|e| PipelineError::new(Stage::Export, ErrorKind::Failure, e))?;
    }
    Ok(out)
}

fn write_intermediates(out: &PipelineOutput, dir: &Path) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    std::fs::create_dir_all(dir)?;
    pnm::write_pgm8(dir.join("rectified_left.pgm"), &out.rectified.0)?;
    pnm::write_pgm8(dir.join("rectified_right.pgm"), &out.rectified.1)?;
    sgm::write_disparity(dir.join("disparity.pgm"), dir.join("disparity.txt"), &out.disparity)?;
    pnm::write_pgm8(dir.join("disparity_normalized.pgm"), &out.disparity_image)?;
    pnm::write_pgm8(dir.join("dilated.pgm"), &out.height_input)?;
    std::fs::write(dir.join("height.json"), out.height.to_json())?;
    for (i, s) in out.sweeps.iter().enumerate() {
        std::fs::write(dir.join(format!("sweep_{i}.csv")), lrf::sweep_to_csv(s))?;
    }
    std::fs::write(dir.join("sweep_aggregated.csv"), lrf::sweep_to_csv(&out.aggregated))?;
    std::fs::write(dir.join("points.csv"), lrf::points_to_csv(&out.map.points))?;
    out.map.write_json(dir.join("map.json"))?;
    fusion::render_plot(&out.map, fusion::DEFAULT_PLOT_SIZE, fusion::DEFAULT_PLOT_SIZE).write(dir.join("map.ppm"))?;
    Ok(())
}

//! `objdim`: stage-by-stage access to the dimension pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 unreadable input,
//! 4 stage failure.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use objdim::dimension::{self, EdgeParams, HeightReport};
use objdim::fusion::{self, EnvironmentMap, HeightObservation};
use objdim::image::GrayImage;
use objdim::io::pnm;
use objdim::lrf;
use objdim::morph::{self, StructuringElement};
use objdim::pipeline::{
    self, match_pair, rectify_pair, run_pipeline, ErrorKind, Inputs, PipelineConfig, PipelineError, RectifiedPair,
    Stage,
};
use objdim::scene::{self, SceneSpec};
use objdim::sgm;
use objdim::stereo::StereoRig;

#[derive(Parser, Debug)]
#[command(name = "objdim", version, about = "Object dimensions from a stereo pair and a 360-degree range finder")]
struct Cli {
    /// Pipeline configuration file; without it the built-in synthetic scene is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the scene seed (range finder noise) of synthetic inputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write every intermediate product.
    #[arg(long, global = true)]
    emit_intermediates: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rectify a stereo pair.
    Rectify(PairArgs),
    /// Rectify (unless --rectified) and run the semi-global matcher.
    Disparity {
        #[command(flatten)]
        pair: PairArgs,
        /// The inputs are already rectified with the left view as reference.
        #[arg(long)]
        rectified: bool,
    },
    /// Dilate an 8-bit disparity image.
    Dilate {
        #[arg(long)]
        input: PathBuf,
        /// Structuring element width and height.
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        kernel: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Object height from an 8-bit disparity (or grey) image.
    Height {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::MaxIntensity)]
        method: Method,
    },
    /// Range finder packet streams.
    Lrf {
        #[command(subcommand)]
        command: LrfCommand,
    },
    /// Ground-truth generation from a scene.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Attach a height report to the footprints of a scan-only map.
    Fuse {
        /// Map written by `lrf map`.
        #[arg(long)]
        map: PathBuf,
        /// Report written by `height`.
        #[arg(long)]
        height: PathBuf,
        /// 16-bit disparity map (with its .txt sidecar) the height came from;
        /// only used for the quality figures.
        #[arg(long)]
        disparity: Option<PathBuf>,
    },
    /// Full pipeline: map.json and map.ppm.
    Run,
}

#[derive(Subcommand, Debug)]
enum LrfCommand {
    /// Decode packet streams into per-revolution sweeps.
    Decode(PacketArgs),
    /// Decode, aggregate the revolutions and apply the range gate.
    Aggregate(PacketArgs),
    /// Decode through footprints; writes a map without heights.
    Map(PacketArgs),
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Rendered pair, exact disparity and rig calibration.
    Stereo,
    /// Noisy range finder realizations as CSV.
    Sweep,
    /// Encoded packet stream of all realizations.
    Packets,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long, requires = "right")]
    left: Option<PathBuf>,
    #[arg(long, requires = "left")]
    right: Option<PathBuf>,
    /// Rig calibration; defaults to the one in --config.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PacketArgs {
    /// Packet stream files, `-` for standard input; default to those in --config.
    #[arg(long, num_args = 1..)]
    packets: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    MaxIntensity,
    CannyRect,
    /// Max-intensity into height.json, Canny rectangle into height_canny.json.
    Both,
}

type Result<T> = std::result::Result<T, PipelineError>;

fn config_error(e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorKind::Config, e)
}

fn io_error(stage: Stage) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Failure, e)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::read(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?,
        None => PipelineConfig::synthetic(SceneSpec::default()),
    };
    if let (Some(seed), Inputs::Synthetic(scene)) = (cli.seed, &mut cfg.inputs) {
        scene.seed = seed;
    }
    Ok(cfg)
}

fn scene_of(cfg: &PipelineConfig) -> Result<&SceneSpec> {
    match &cfg.inputs {
        Inputs::Synthetic(scene) => Ok(scene),
        Inputs::Files { .. } => Err(config_error("this command needs a scene; the config names input files")),
    }
}

fn read_gray(stage: Stage, path: &Path) -> Result<GrayImage> {
    pnm::read_gray8(path).map_err(|e| PipelineError::new(stage, ErrorKind::Input, format!("{}: {e}", path.display())))
}

fn write_gray(out: &Path, name: &str, img: &GrayImage, stage: Stage) -> Result<()> {
    pnm::write_pgm8(out.join(name), img).map_err(|e| PipelineError::new(stage, ErrorKind::Failure, e))
}

/// Stereo pair and rig from explicit paths, falling back to the config.
fn load_pair(cfg: &PipelineConfig, args: &PairArgs) -> Result<((GrayImage, GrayImage), StereoRig)> {
    let rig = match &args.calibration {
        Some(path) => Some(
            StereoRig::read_calibration(path)
                .map_err(|e| PipelineError::new(Stage::Rectify, ErrorKind::Input, format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    match (&args.left, &args.right) {
        (Some(l), Some(r)) => {
            let pair = (read_gray(Stage::Rectify, l)?, read_gray(Stage::Rectify, r)?);
            let rig = match rig {
                Some(rig) => rig,
                None => pipeline::stereo_inputs(&cfg.inputs)?.1,
            };
            Ok((pair, rig))
        }
        _ => {
            let (pair, config_rig) = pipeline::stereo_inputs(&cfg.inputs)?;
            Ok((pair, rig.unwrap_or(config_rig)))
        }
    }
}

fn load_streams(cfg: &PipelineConfig, args: &PacketArgs) -> Result<Vec<Vec<u8>>> {
    if args.packets.is_empty() {
        return pipeline::packet_streams(&cfg.inputs);
    }
    args.packets
        .iter()
        .map(|p| {
            let bytes = if p.as_os_str() == "-" {
                let mut buf = Vec::new();
                std::io::stdin().read_to_end(&mut buf).map(|_| buf)
            } else {
                std::fs::read(p)
            };
            bytes.map_err(|e| PipelineError::new(Stage::Decode, ErrorKind::Input, format!("{}: {e}", p.display())))
        })
        .collect()
}

fn rectify(cli: &Cli, cfg: &PipelineConfig, args: &PairArgs) -> Result<RectifiedPair> {
    let ((left, right), rig) = load_pair(cfg, args)?;
    let pair = rectify_pair(&rig, &left, &right)?;
    write_gray(&cli.out, "rectified_left.pgm", &pair.left, Stage::Rectify)?;
    write_gray(&cli.out, "rectified_right.pgm", &pair.right, Stage::Rectify)?;
    Ok(pair)
}

fn disparity(cli: &Cli, cfg: &PipelineConfig, args: &PairArgs, rectified: bool) -> Result<()> {
    let pair = if rectified {
        let (l, r) = match (&args.left, &args.right) {
            (Some(l), Some(r)) => (read_gray(Stage::Disparity, l)?, read_gray(Stage::Disparity, r)?),
            _ => return Err(config_error("--rectified needs --left and --right")),
        };
        RectifiedPair { left: l, right: r, disparity_sign: 1.0 }
    } else if cli.emit_intermediates {
        rectify(cli, cfg, args)?
    } else {
        let ((left, right), rig) = load_pair(cfg, args)?;
        rectify_pair(&rig, &left, &right)?
    };
    let disp = match_pair(&pair, &cfg.matcher)?;
    sgm::write_disparity(cli.out.join("disparity.pgm"), cli.out.join("disparity.txt"), &disp)
        .map_err(|e| PipelineError::new(Stage::Disparity, ErrorKind::Failure, e))?;
    let normalized = sgm::normalize_to_image(&disp).image;
    write_gray(&cli.out, "disparity_normalized.pgm", &normalized, Stage::Disparity)?;
    println!(
        "disparity {}x{}, range [{}, {}), valid {:.1}%",
        disp.cols(),
        disp.rows(),
        disp.min_disparity(),
        disp.min_disparity() + disp.num_disparities() as i32,
        100.0 * disp.valid_fraction()
    );
    Ok(())
}

fn dilate(cli: &Cli, cfg: &PipelineConfig, input: &Path, kernel: Option<&[usize]>, iterations: Option<usize>) -> Result<()> {
    let img = read_gray(Stage::Dilate, input)?;
    let (default_kernel, default_iterations) = cfg.dilation.unwrap_or((StructuringElement::default(), 1));
    let kernel = match kernel {
        Some(&[w, h]) => StructuringElement::new(w, h).map_err(config_error)?,
        _ => default_kernel,
    };
    let out = morph::dilate(&img, kernel, iterations.unwrap_or(default_iterations)).map_err(config_error)?;
    write_gray(&cli.out, "dilated.pgm", &out, Stage::Dilate)
}

fn height(cli: &Cli, cfg: &PipelineConfig, input: &Path, method: Method) -> Result<()> {
    let img = read_gray(Stage::Height, input)?;
    let failed = |e: dimension::DimensionError| PipelineError::new(Stage::Height, ErrorKind::Failure, e);
    let write = |name: &str, report: &HeightReport| {
        std::fs::write(cli.out.join(name), report.to_json()).map_err(io_error(Stage::Height))
    };
    if matches!(method, Method::MaxIntensity | Method::Both) {
        if cli.emit_intermediates {
            let (_, mask) = morph::max_intensity_threshold(&img, cfg.delta)
                .map_err(|e| PipelineError::new(Stage::Height, ErrorKind::Failure, e))?;
            write_gray(&cli.out, "threshold_mask.pgm", &mask, Stage::Height)?;
        }
        let report = dimension::height_from_disparity(&img, &cfg.height, cfg.delta).map_err(failed)?;
        write("height.json", &report)?;
        print!("{}", report.to_text());
    }
    if matches!(method, Method::CannyRect | Method::Both) {
        let edges = dimension::canny_edges(&img, &EdgeParams::default()).map_err(failed)?;
        if cli.emit_intermediates {
            write_gray(&cli.out, "edges.pgm", &edges, Stage::Height)?;
        }
        let report = dimension::height_from_edges(&edges, &cfg.height).map_err(failed)?;
        let name = if matches!(method, Method::Both) { "height_canny.json" } else { "height.json" };
        write(name, &report)?;
        print!("{}", report.to_text());
    }
    Ok(())
}

fn write_map(out: &Path, map: &EnvironmentMap) -> Result<()> {
    let export = |e: fusion::FusionError| PipelineError::new(Stage::Export, ErrorKind::Failure, e);
    map.write_json(out.join("map.json")).map_err(export)?;
    fusion::render_plot(map, fusion::DEFAULT_PLOT_SIZE, fusion::DEFAULT_PLOT_SIZE)
        .write(out.join("map.ppm"))
        .map_err(export)
}

fn lrf_command(cli: &Cli, cfg: &PipelineConfig, command: &LrfCommand) -> Result<()> {
    let (LrfCommand::Decode(args) | LrfCommand::Aggregate(args) | LrfCommand::Map(args)) = command;
    let streams = load_streams(cfg, args)?;
    let write = |name: String, text: String| std::fs::write(cli.out.join(name), text).map_err(io_error(Stage::Decode));
    if let LrfCommand::Decode(_) = command {
        let mut n = 0;
        for (i, bytes) in streams.iter().enumerate() {
            let d = lrf::decode_stream(bytes);
            let revs = lrf::split_sweeps(&d.packets);
            println!(
                "stream {i}: {} packets, {} failed checksum, {} bytes skipped, {} revolutions",
                d.packets.len(),
                d.rejected,
                d.skipped_bytes,
                revs.len()
            );
            for rev in revs {
                write(format!("sweep_{n}.csv"), lrf::sweep_to_csv(&lrf::assemble_sweep(rev)))?;
                n += 1;
            }
        }
        return Ok(());
    }
    let scan = pipeline::process_scans(cfg, &streams)?;
    if cli.emit_intermediates {
        for (i, s) in scan.sweeps.iter().enumerate() {
            write(format!("sweep_{i}.csv"), lrf::sweep_to_csv(s))?;
        }
    }
    write("sweep_aggregated.csv".into(), lrf::sweep_to_csv(&scan.aggregated))?;
    println!(
        "{} revolutions, {} of 360 angles after aggregation and gating",
        scan.sweeps.len(),
        scan.aggregated.coverage()
    );
    if let LrfCommand::Map(_) = command {
        write("points.csv".into(), lrf::points_to_csv(&scan.points))?;
        let fused = fusion::fuse(&scan.footprints, None, &cfg.camera_axis, cfg.association_radius_mm, "sweep0");
        let map = EnvironmentMap {
            objects: fused.objects,
            points: scan.points,
            meta: pipeline::map_meta(cfg, scan.sweeps.len(), Vec::new()),
        };
        for f in &scan.footprints {
            println!(
                "footprint at ({:.1}, {:.1}) mm: {:.1} x {:.1} mm, yaw {:.3} rad, {} points",
                f.center.x, f.center.y, f.length, f.width, f.yaw, f.support_count
            );
        }
        write_map(&cli.out, &map)?;
    }
    Ok(())
}

fn synth_command(cli: &Cli, cfg: &PipelineConfig, command: &SynthCommand) -> Result<()> {
    let scene = scene_of(cfg)?;
    let write = |name: &str, bytes: Vec<u8>| std::fs::write(cli.out.join(name), bytes).map_err(io_error(Stage::Synthesize));
    match command {
        SynthCommand::Stereo => {
            let r = scene::render_stereo(scene);
            write_gray(&cli.out, "left.pgm", &r.left, Stage::Synthesize)?;
            write_gray(&cli.out, "right.pgm", &r.right, Stage::Synthesize)?;
            sgm::write_disparity(cli.out.join("gt_disparity.pgm"), cli.out.join("gt_disparity.txt"), &r.gt_disparity)
                .map_err(|e| PipelineError::new(Stage::Synthesize, ErrorKind::Failure, e))?;
            let rig = scene.camera.rig().map_err(|e| PipelineError::new(Stage::Synthesize, ErrorKind::Failure, e))?;
            write("rig.calib", rig.to_calibration().into_bytes())?;
            println!("rendered {}x{} pair, {} pixels with ground truth", r.left.cols(), r.left.rows(), r.gt_disparity.valid_count());
        }
        SynthCommand::Sweep => {
            for (i, s) in scene::raycast_sweep(scene, &scene.noise, scene.realizations, scene.seed).iter().enumerate() {
                write(&format!("sweep_{i}.csv"), lrf::sweep_to_csv(s).into_bytes())?;
            }
        }
        SynthCommand::Packets => {
            let bytes = pipeline::packet_streams(&cfg.inputs)?.concat();
            println!("{} packets", bytes.len() / lrf::PACKET_LEN);
            write("packets.bin", bytes)?;
        }
    }
    if cli.emit_intermediates {
        write("scene.txt", scene.to_text().into_bytes())?;
    }
    Ok(())
}

fn fuse_command(cli: &Cli, cfg: &PipelineConfig, map_path: &Path, height_path: &Path, disparity: Option<&Path>) -> Result<()> {
    let read = |p: &Path| {
        std::fs::read_to_string(p)
            .map_err(|e| PipelineError::new(Stage::Fuse, ErrorKind::Input, format!("{}: {e}", p.display())))
    };
    let bad_input = |p: &Path, e: &dyn std::fmt::Display| {
        PipelineError::new(Stage::Fuse, ErrorKind::Input, format!("{}: {e}", p.display()))
    };
    let mut map = EnvironmentMap::from_json(&read(map_path)?).map_err(|e| bad_input(map_path, &e))?;
    let report = HeightReport::from_json(&read(height_path)?).map_err(|e| bad_input(height_path, &e))?;
    let footprints: Vec<_> = map.objects.iter().map(|o| o.footprint).collect();
    let observation = HeightObservation {
        report,
        frame: "frame0".into(),
        valid_fraction: match disparity {
            Some(p) => Some(
                sgm::read_disparity(p, p.with_extension("txt"))
                    .map_err(|e| bad_input(p, &e))?
                    .valid_fraction(),
            ),
            None => None,
        },
    };
    let fused = fusion::fuse(&footprints, Some(&observation), &cfg.camera_axis, cfg.association_radius_mm, "sweep0");
    map.objects = fused.objects;
    map.meta.unattached_heights_cm = fused.unattached.iter().map(|h| h.report.height_cm).collect();
    print_objects(&map);
    write_map(&cli.out, &map)
}

fn print_objects(map: &EnvironmentMap) {
    println!("{} objects", map.objects.len());
    for o in &map.objects {
        let f = &o.footprint;
        let h = o.height_cm.map_or("unknown".to_string(), |h| format!("{h:.2} cm"));
        println!("  ({:.1}, {:.1}) mm: {:.1} x {:.1} mm, height {h}", f.center.x, f.center.y, f.length, f.width);
    }
    for h in &map.meta.unattached_heights_cm {
        println!("  unattached height {h:.2} cm");
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| PipelineError::new(Stage::Export, ErrorKind::Failure, format!("{}: {e}", cli.out.display())))?;
    match &cli.command {
        Command::Rectify(args) => rectify(cli, &cfg, args).map(drop),
        Command::Disparity { pair, rectified } => disparity(cli, &cfg, pair, *rectified),
        Command::Dilate { input, kernel, iterations } => dilate(cli, &cfg, input, kernel.as_deref(), *iterations),
        Command::Height { input, method } => height(cli, &cfg, input, *method),
        Command::Lrf { command } => lrf_command(cli, &cfg, command),
        Command::Synth { command } => synth_command(cli, &cfg, command),
        Command::Fuse { map, height, disparity } => fuse_command(cli, &cfg, map, height, disparity.as_deref()),
        Command::Run => {
            let dir = cli.emit_intermediates.then_some(cli.out.as_path());
            let out = run_pipeline(&cfg, dir)?;
            if dir.is_none() {
                write_map(&cli.out, &out.map)?;
            }
            print_objects(&out.map);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind {
                ErrorKind::Config => 2,
                ErrorKind::Input => 3,
                ErrorKind::Failure => 4,
            })
        }
    }
}

use std::path::Path;
use std::process::{Command, Output};

fn objdim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objdim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small scene so the stereo commands stay quick.
const SMALL_CONFIG: &str = "\
[input]
scene inline
[matcher]
block_size 5
num_disparities 48
[scene]
seed 5
[camera]
rows 120
cols 160
focal 180
cx 79.5
cy 59.5
[object]
center 0 850 150
size 300 300 300
seed 3
";

#[test]
fn run_writes_map_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL_CONFIG).unwrap();
    for out in ["a", "b"] {
        let o = objdim(dir.path(), &["run", "--config", "small.cfg", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a/map.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/map.json")).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("a/map.ppm").exists());
    let o = objdim(dir.path(), &["run", "--config", "small.cfg", "--out", "c", "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(dir.path().join("c/map.json")).unwrap(), a);
}

#[test]
fn emit_intermediates_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL_CONFIG).unwrap();
    let o = objdim(dir.path(), &["run", "--config", "small.cfg", "--out", "i", "--emit-intermediates"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "rectified_left.pgm",
        "rectified_right.pgm",
        "disparity.pgm",
        "disparity.txt",
        "disparity_normalized.pgm",
        "dilated.pgm",
        "height.json",
        "sweep_0.csv",
        "sweep_4.csv",
        "sweep_aggregated.csv",
        "points.csv",
        "map.json",
        "map.ppm",
    ] {
        assert!(dir.path().join("i").join(f).exists(), "{f}");
    }
}

#[test]
fn staged_commands_match_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.cfg"), SMALL_CONFIG).unwrap();
    let steps: &[&[&str]] = &[
        &["synth", "stereo", "--config", "small.cfg", "--out", "s"],
        &["synth", "packets", "--config", "small.cfg", "--out", "s"],
        &["disparity", "--config", "small.cfg", "--left", "s/left.pgm", "--right", "s/right.pgm", "--calibration", "s/rig.calib", "--out", "d"],
        &["dilate", "--input", "d/disparity_normalized.pgm", "--out", "d"],
        &["height", "--input", "d/dilated.pgm", "--out", "d"],
        &["lrf", "map", "--packets", "s/packets.bin", "--out", "l"],
        &["fuse", "--map", "l/map.json", "--height", "d/height.json", "--disparity", "d/disparity.pgm", "--out", "f"],
        &["run", "--config", "small.cfg", "--out", "r"],
    ];
    for args in steps {
        let o = objdim(p, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let staged = objdim::fusion::EnvironmentMap::read_json(p.join("f/map.json")).unwrap();
    let full = objdim::fusion::EnvironmentMap::read_json(p.join("r/map.json")).unwrap();
    assert_eq!(full.objects.len(), 1);
    assert!(full.objects[0].height_cm.is_some());
    assert_eq!(staged.objects.len(), full.objects.len());
    for (a, b) in staged.objects.iter().zip(&full.objects) {
        assert_eq!(a.footprint, b.footprint);
        assert_eq!(a.height_cm, b.height_cm);
        assert_eq!(a.quality, b.quality);
    }
}

#[test]
fn lrf_decode_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(objdim(p, &["synth", "packets", "--out", "s"]).status.success());
    let o = objdim(p, &["lrf", "decode", "--packets", "s/packets.bin", "--out", "d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("450 packets"));
    for i in 0..5 {
        assert!(p.join(format!("d/sweep_{i}.csv")).exists());
    }
    let o = objdim(p, &["lrf", "aggregate", "--packets", "s/packets.bin", "--out", "a"]);
    assert!(o.status.success());
    let agg = objdim::lrf::sweep_from_csv(&std::fs::read_to_string(p.join("a/sweep_aggregated.csv")).unwrap()).unwrap();
    assert!(agg.ranges.iter().flatten().all(|&d| d > 0 && d <= 3000));
}

#[test]
fn canny_height_method() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let img = objdim::image::GrayImage::from_fn(480, 64, |r, c| if r >= 168 && (10..50).contains(&c) { 200 } else { 20 }).unwrap();
    objdim::io::pnm::write_pgm8(p.join("box.pgm"), &img).unwrap();
    let o = objdim(p, &["height", "--input", "box.pgm", "--method", "canny-rect", "--out", "h", "--emit-intermediates"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = objdim::dimension::HeightReport::from_json(&std::fs::read_to_string(p.join("h/height.json")).unwrap()).unwrap();
    assert!(report.r_top.abs_diff(168) <= 1);
    assert!(p.join("h/edges.pgm").exists());

    let o = objdim(p, &["height", "--input", "box.pgm", "--method", "both", "--out", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("method: max-intensity") && stdout.contains("method: canny-rect"));
    assert!(p.join("b/height.json").exists() && p.join("b/height_canny.json").exists());
}

#[test]
fn packets_from_standard_input() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(objdim(p, &["synth", "packets", "--out", "s"]).status.success());
    let bytes = std::fs::read(p.join("s/packets.bin")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_objdim"))
        .current_dir(p)
        .args(["lrf", "decode", "--packets", "-", "--out", "d"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&bytes).unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("450 packets, 0 failed checksum"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // usage error and unreadable or malformed config
    assert_eq!(objdim(p, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(objdim(p, &["run", "--config", "missing.cfg"]).status.code(), Some(2));
    std::fs::write(p.join("bad.cfg"), "[input]\nscene default\n[matcher]\nblock_size 4\n").unwrap();
    assert_eq!(objdim(p, &["run", "--config", "bad.cfg"]).status.code(), Some(2));

    // missing inputs
    let o = objdim(p, &["height", "--input", "missing.pgm"]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(p.join("files.cfg"), "[input]\nleft l.pgm\nright r.pgm\ncalibration none.calib\npackets p.bin\n").unwrap();
    let o = objdim(p, &["run", "--config", "files.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage rectify"), "{}", stderr(&o));

    // a stage rejecting well-formed input: nothing bright enough to threshold
    let black = objdim::image::GrayImage::new(10, 10).unwrap();
    objdim::io::pnm::write_pgm8(p.join("black.pgm"), &black).unwrap();
    let o = objdim(p, &["height", "--input", "black.pgm"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage height"));
}

#[test]
fn zero_packet_stream_gives_empty_map() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("zeros.bin"), vec![0u8; 22 * 90]).unwrap();
    let o = objdim(p, &["lrf", "map", "--packets", "zeros.bin", "--out", "m"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let map = objdim::fusion::EnvironmentMap::read_json(p.join("m/map.json")).unwrap();
    assert!(map.objects.is_empty() && map.points.is_empty());
}

//! The `navfuse` binary: files written, exit codes and stream discipline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use navfuse::eval::StampedPose;
use navfuse::geom::{Pose3, Rotation3};
use navfuse::io;
use navfuse::polarimetry::{MosaicLayout, PolarMosaic};
use navfuse::sim::{synthesize_polar_scene, PolarScene, PolarValue};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn navfuse(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navfuse"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "{}", stderr(o));
    assert!(o.stdout.is_empty(), "data must go to files only");
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn help_and_usage_errors() {
    let o = navfuse(&[&"--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["simulate", "fuse", "polar", "eval"] {
        let o = navfuse(&[&sub, &"--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
    assert_eq!(navfuse(&[&"frobnicate"]).status.code(), Some(1));
    assert_eq!(navfuse(&[&"eval", &"a.tum"]).status.code(), Some(1));
    assert_eq!(navfuse(&[&"eval", &"a", &"b", &"c", &"--align", &"sideways"]).status.code(), Some(1));
    let o = navfuse(&[&"polar", &"m.pgm", &"out", &"--quality", &"1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("quality"));
}

#[test]
fn simulate_writes_a_complete_reproducible_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&navfuse(&[&"simulate", &fixture("scene_d.toml"), &a]));
    assert_ok(&navfuse(&[&"simulate", &fixture("scene_d.toml"), &b]));
    let names = listing(&a);
    assert_eq!(
        names,
        ["flow.csv", "imu.csv", "lidar_odom.csv", "loops.csv", "mag.csv", "truth.tum", "vio_odom.csv"]
    );
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let truth_text = fs::read_to_string(a.join("truth.tum")).unwrap();
    let digest = navfuse_cli::config::hex_digest(&fs::read(fixture("scene_d.toml")).unwrap());
    assert!(truth_text.starts_with(&format!("# seed 1\n# config_sha256 {digest}\n")));
    let truth = io::read_tum(&a.join("truth.tum")).unwrap();
    let length: f64 = truth.windows(2).map(|w| (w[1].pose.translation - w[0].pose.translation).norm()).sum();
    assert!((length - 256.0).abs() <= 0.02 * 256.0, "{length}");
}

#[test]
fn seed_list_writes_one_directory_per_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("trials");
    assert_ok(&navfuse(&[&"simulate", &fixture("clean/straight.toml"), &out, &"--seed", &"3", &"--seed", &"4"]));
    assert_eq!(listing(&out), ["seed-3", "seed-4"]);
    let head = fs::read_to_string(out.join("seed-4/truth.tum")).unwrap();
    assert!(head.starts_with("# seed 4\n"));
}

#[test]
fn invalid_scenarios_report_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("zero.toml");
    fs::write(&bad, "seed = 1\nduration = 0.0\n\n[path]\nkind = \"loop\"\nradius = 5.0\nlaps = 1.0\nspeed = 1.0\n").unwrap();
    let o = navfuse(&[&"simulate", &bad, &tmp.path().join("out")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zero.toml:2:"), "{}", stderr(&o));
    fs::write(&bad, "seed = 1\n[path]\nkind = \"spiral\"\n").unwrap();
    let o = navfuse(&[&"simulate", &bad, &tmp.path().join("out")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zero.toml:3:"), "{}", stderr(&o));
    let o = navfuse(&[&"simulate", &tmp.path().join("missing.toml"), &tmp.path().join("out")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_noise_pipeline_recovers_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let (log, fused, report) = (tmp.path().join("log"), tmp.path().join("fused"), tmp.path().join("report"));
    assert_ok(&navfuse(&[&"simulate", &fixture("clean/straight.toml"), &log]));
    assert_ok(&navfuse(&[&"fuse", &log, &fused]));
    assert_eq!(listing(&fused), ["estimate.tum", "gating.csv", "stats.json"]);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(fused.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["unconverged"], 0);
    assert_eq!(stats["toggles"]["mag"], true);
    assert_ok(&navfuse(&[
        &"eval",
        &fused.join("estimate.tum"),
        &log.join("truth.tum"),
        &report,
        &"--align",
        &"none",
    ]));
    assert_eq!(listing(&report), ["errors.csv", "report.csv", "summary.txt"]);
    let row = fs::read_to_string(report.join("report.csv")).unwrap();
    let ate: f64 = row.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    // both trajectories pass through 9-significant-digit text
    assert!(ate <= 1e-6, "{ate}");
    let summary = fs::read_to_string(report.join("summary.txt")).unwrap();
    assert!(summary.contains("ATE RMSE") && summary.contains("length"));
}

#[test]
fn ablation_flags_and_missing_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log");
    assert_ok(&navfuse(&[&"simulate", &fixture("clean/straight.toml"), &log]));

    let o = navfuse(&[&"fuse", &log, &tmp.path().join("x"), &"--no-lidar", &"--no-vio", &"--no-flow"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unobservable"));

    fs::remove_file(log.join("mag.csv")).unwrap();
    let o = navfuse(&[&"fuse", &log, &tmp.path().join("x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing mag stream"), "{}", stderr(&o));

    let out = tmp.path().join("no-mag");
    assert_ok(&navfuse(&[&"fuse", &log, &out, &"--no-mag", &"--no-lidar"]));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["lidar_factors"], 0);
    assert_eq!(stats["stats"]["mag_accepted"], 0);
    assert_eq!(fs::read_to_string(out.join("gating.csv")).unwrap(), "t,innovation_rad,accepted\n");
}

#[test]
fn strict_mode_flags_non_convergence() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log");
    assert_ok(&navfuse(&[&"simulate", &fixture("scene_mag.toml"), &log]));
    let config = tmp.path().join("run.toml");
    fs::write(&config, "[estimator.solver]\nmax_iterations = 1\nrelative_cost_tolerance = 0.0\nstep_tolerance = 0.0\n").unwrap();
    let out = tmp.path().join("out");
    let o = navfuse(&[&"fuse", &log, &out, &"--config", &config, &"--strict"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(out.join("estimate.tum").exists());
    let o = navfuse(&[&"fuse", &log, &out, &"--config", &config]);
    assert_ok(&o);
}

fn write_mosaic(path: &Path, scene: &PolarScene) {
    io::write_mosaic_pgm(path, &synthesize_polar_scene(scene, MosaicLayout::default()).unwrap()).unwrap();
}

fn ppm_header(path: &Path) -> Vec<String> {
    let bytes = fs::read(path).unwrap();
    String::from_utf8_lossy(&bytes[..32]).split_whitespace().take(4).map(String::from).collect()
}

fn corners(path: &Path) -> Vec<navfuse::polarimetry::Corner> {
    io::parse_corners(&fs::read_to_string(path).unwrap(), path).unwrap()
}

#[test]
fn polar_enhances_a_dop_only_pattern() {
    let tmp = tempfile::tempdir().unwrap();
    let mosaic = tmp.path().join("dop.pgm");
    let scene = PolarScene::checkerboard(
        96,
        64,
        16,
        PolarValue::new(200.0, 0.0, 0.0),
        PolarValue::new(200.0, 0.8, 0.0),
    );
    write_mosaic(&mosaic, &scene);
    let out = tmp.path().join("out");
    assert_ok(&navfuse(&[&"polar", &mosaic, &out, &"--quality", &"0.9"]));
    assert_eq!(listing(&out), ["corners_enhanced.csv", "corners_gray.csv", "rgb.ppm"]);
    assert!(corners(&out.join("corners_gray.csv")).is_empty());
    assert!(!corners(&out.join("corners_enhanced.csv")).is_empty());
    assert_eq!(ppm_header(&out.join("rgb.ppm")), ["P6", "96", "64", "255"]);
}

#[test]
fn polar_keeps_grayscale_corners_on_textured_input() {
    let tmp = tempfile::tempdir().unwrap();
    let mosaic = tmp.path().join("tex.pgm");
    let scene = PolarScene::checkerboard(
        96,
        64,
        16,
        PolarValue::new(60.0, 0.2, 0.3),
        PolarValue::new(400.0, 0.2, 0.3),
    );
    write_mosaic(&mosaic, &scene);
    let out = tmp.path().join("out");
    assert_ok(&navfuse(&[&"polar", &mosaic, &out, &"--quality", &"0.5"]));
    let gray = corners(&out.join("corners_gray.csv"));
    let enhanced = corners(&out.join("corners_enhanced.csv"));
    assert!(!gray.is_empty());
    for g in &gray {
        assert!(enhanced.iter().any(|e| (e.x - g.x).hypot(e.y - g.y) <= 1.0), "{g:?}");
    }
}

#[test]
fn polar_full_frame_and_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full.pgm");
    let samples = (0..PolarMosaic::SENSOR_WIDTH * PolarMosaic::SENSOR_HEIGHT)
        .map(|i| (i * 7 % 251) as u8)
        .collect();
    let mosaic = PolarMosaic::new(
        PolarMosaic::SENSOR_WIDTH,
        PolarMosaic::SENSOR_HEIGHT,
        samples,
        MosaicLayout::default(),
    )
    .unwrap();
    io::write_mosaic_pgm(&full, &mosaic).unwrap();
    let out = tmp.path().join("out");
    assert_ok(&navfuse(&[&"polar", &full, &out]));
    assert_eq!(ppm_header(&out.join("rgb.ppm")), ["P6", "1224", "1024", "255"]);

    let odd = tmp.path().join("odd.pgm");
    let mut bytes = b"P5\n5 4\n255\n".to_vec();
    bytes.extend([0u8; 20]);
    fs::write(&odd, bytes).unwrap();
    let o = navfuse(&[&"polar", &odd, &tmp.path().join("x")]);
    assert_eq!(o.status.code(), Some(2));

    let junk = tmp.path().join("junk.pgm");
    fs::write(&junk, b"not an image").unwrap();
    assert_eq!(navfuse(&[&"polar", &junk, &tmp.path().join("x")]).status.code(), Some(2));
}

fn line(n: usize, dz: f64) -> Vec<StampedPose<f64>> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.2;
            StampedPose::new(t, Pose3::new(Rotation3::from_euler_zyx(0.1 * t, 0.0, 0.0), [t, 0.5 * t, dz].into()))
        })
        .collect()
}

#[test]
fn eval_reports_known_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("truth.tum");
    io::write_tum(&truth, &line(50, 0.0), &[]).unwrap();

    let out = tmp.path().join("same");
    assert_ok(&navfuse(&[&"eval", &truth, &truth, &out, &"--rotation"]));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("ate_rmse,rmse_x,rmse_y,rmse_z,length,pairs,rotation_rmse_rad\n0,0,0,0,"));

    let shifted = tmp.path().join("shifted.tum");
    io::write_tum(&shifted, &line(50, -1.0), &[]).unwrap();
    let out = tmp.path().join("offset");
    assert_ok(&navfuse(&[&"eval", &shifted, &truth, &out, &"--align", &"none"]));
    let row: Vec<f64> = fs::read_to_string(out.join("report.csv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(&row[..4], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(row[5], 50.0);
    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 51);
    assert!(errors.lines().nth(1).unwrap().ends_with(",0,0,1,1"));
}

#[test]
fn eval_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("truth.tum");
    io::write_tum(&truth, &line(20, 0.0), &[]).unwrap();
    let late = tmp.path().join("late.tum");
    let shifted: Vec<_> = line(20, 0.0)
        .into_iter()
        .map(|s| StampedPose::new(s.t + 100.0, s.pose))
        .collect();
    io::write_tum(&late, &shifted, &[]).unwrap();
    let o = navfuse(&[&"eval", &late, &truth, &tmp.path().join("x")]);
    assert_eq!(o.status.code(), Some(2));

    let broken = tmp.path().join("broken.tum");
    fs::write(&broken, "# header\n0 0 0 0 0 0 0 1\n0.2 0 0 oops 0 0 0 1\n").unwrap();
    let o = navfuse(&[&"eval", &broken, &truth, &tmp.path().join("x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.tum:3"), "{}", stderr(&o));
}

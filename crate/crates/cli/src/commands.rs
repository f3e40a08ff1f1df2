use std::fs;
use std::path::Path;

use navfuse::eval::{evaluate, StampedPose};
use navfuse::fusion::{run_estimator, EstimatorConfig, FactorToggles, RunStats};
use navfuse::io::{self, SensorStream};
use navfuse::polarimetry::{demosaic, detect_corners, detect_enhanced, process, CornerParams, MosaicLayout};
use navfuse::sim::simulate as simulate_log;
use serde::Serialize;

use crate::config::{load_scenario, RunConfig};
use crate::{CliError, EvalArgs, FuseArgs, PolarArgs, SimulateArgs};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let loaded = load_scenario(&args.scenario)?;
    let seeds = if args.seeds.is_empty() {
        run_config(args.config.as_deref())?.seeds
    } else {
        args.seeds.clone()
    };
    let trials: Vec<(u64, std::path::PathBuf)> = match seeds.as_slice() {
        [] => vec![(loaded.scenario.seed, args.out.clone())],
        [one] => vec![(*one, args.out.clone())],
        many => many.iter().map(|s| (*s, args.out.join(format!("seed-{s}")))).collect(),
    };
    for (seed, dir) in trials {
        let mut scenario = loaded.scenario.clone();
        scenario.seed = seed;
        let log = simulate_log(&scenario)?;
        let header = vec![format!("seed {seed}"), format!("config_sha256 {}", loaded.sha256)];
        io::write_sensor_log(&dir, &log, &header)?;
        log::info!(
            "seed {seed}: {} IMU samples, {:.1} m of truth -> {}",
            log.imu.len(),
            navfuse::sim::truth_length(&log.truth),
            dir.display()
        );
    }
    Ok(())
}

/// Streams a configuration needs; the rest may be absent.
fn required_streams(t: &FactorToggles) -> Vec<SensorStream> {
    let mut req = vec![SensorStream::Imu];
    for (on, stream) in [
        (t.mag, SensorStream::Mag),
        (t.flow_velocity || t.height, SensorStream::Flow),
        (t.lidar, SensorStream::Lidar),
        (t.vio, SensorStream::Vio),
        (t.loops, SensorStream::Loops),
    ] {
        if on {
            req.push(stream);
        }
    }
    req
}

fn apply_flags(config: &mut EstimatorConfig, args: &FuseArgs) {
    let t = &mut config.toggles;
    t.mag &= !args.no_mag;
    t.mag_gate &= !args.no_mag_gate;
    t.flow_velocity &= !args.no_flow;
    t.height &= !args.no_height;
    t.vio &= !args.no_vio;
    t.lidar &= !args.no_lidar;
    t.loops &= !args.no_loop;
}

#[derive(Serialize)]
struct FuseSummary<'a> {
    toggles: &'a FactorToggles,
    stats: &'a RunStats,
}

pub fn fuse(args: &FuseArgs) -> Result<(), CliError> {
    let mut config = run_config(args.config.as_deref())?.estimator;
    apply_flags(&mut config, args);
    if !config.toggles.observable() {
        return Err(CliError::Usage(
            "unobservable configuration: enable at least one of lidar, vio or flow velocity".into(),
        ));
    }
    let log = io::read_sensor_log(&args.log, &required_streams(&config.toggles))?;
    let out = run_estimator(&log, &config)?;
    create_dir(&args.out)?;
    let poses: Vec<_> = out.trajectory.iter().map(|k| StampedPose::new(k.t, k.state.pose)).collect();
    io::write_tum(&args.out.join("estimate.tum"), &poses, &[])?;
    io::write_text(&args.out.join("gating.csv"), &io::format_gating(&out.gating))?;
    let summary = FuseSummary {
        toggles: &config.toggles,
        stats: &out.stats,
    };
    let json = serde_json::to_string_pretty(&summary).expect("stats serialize");
    io::write_text(&args.out.join("stats.json"), &(json + "\n"))?;
    log::info!(
        "{} keyframes, {} solves, {} headings rejected",
        out.stats.keyframes,
        out.stats.optimizations,
        out.stats.mag_rejected
    );
    if out.stats.unconverged > 0 {
        if args.strict {
            return Err(CliError::NonConvergence(out.stats.unconverged));
        }
        log::warn!("{} window solve(s) hit the iteration limit", out.stats.unconverged);
    }
    Ok(())
}

pub fn polar(args: &PolarArgs) -> Result<(), CliError> {
    let quality = match args.quality {
        Some(q) if !(q > 0.0 && q < 1.0) => {
            return Err(CliError::Usage(format!("--quality must lie in (0, 1), got {q}")));
        }
        Some(q) => q,
        None => run_config(args.config.as_deref())?.quality,
    };
    let mosaic = io::read_pgm_mosaic(&args.mosaic, MosaicLayout::default())?;
    let rgb = process(&demosaic(&mosaic)?).rgb;
    let params = CornerParams {
        quality_level: quality,
        ..CornerParams::default()
    };
    let gray = detect_corners(&rgb.green(), &params)?;
    let enhanced = detect_enhanced(&rgb, &params)?;
    create_dir(&args.out)?;
    io::write_ppm(&args.out.join("rgb.ppm"), &rgb)?;
    io::write_text(&args.out.join("corners_gray.csv"), &io::format_corners(&gray))?;
    io::write_text(&args.out.join("corners_enhanced.csv"), &io::format_corners(&enhanced))?;
    log::info!(
        "{}x{}: {} grayscale corners, {} enhanced",
        rgb.width,
        rgb.height,
        gray.len(),
        enhanced.len()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    if !(args.max_dt >= 0.0) {
        return Err(CliError::Usage(format!("--max-dt must be non-negative, got {}", args.max_dt)));
    }
    let estimate = io::read_tum(&args.estimate)?;
    let truth = io::read_tum(&args.truth)?;
    let report = evaluate(&estimate, &truth, args.max_dt, args.align)?;
    create_dir(&args.out)?;
    io::write_text(&args.out.join("report.csv"), &io::format_report(&report, args.rotation))?;
    io::write_text(&args.out.join("errors.csv"), &io::format_error_series(&report))?;
    io::write_text(
        &args.out.join("summary.txt"),
        &io::format_summary(&report, args.align, args.rotation),
    )?;
    log::info!("ATE RMSE {:.6} m over {} pairs", report.ate_rmse, report.series.len());
    Ok(())
}

//! File formats: TUM trajectories, sensor-log CSVs, PNM images and the
//! corner and gating tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::eval::{AlignMode, ErrorReport, StampedPose};
use crate::fusion::GateRecord;
use crate::geom::{Pose3, Rotation3};
use crate::polarimetry::{Corner, GrayImage, MosaicLayout, PolarMosaic, PolarRgb};
use crate::preintegration::ImuSample;
use crate::sim::{FlowSample, MagSample, OdomSample, SensorLog};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("missing {stream} stream ({})", path.display())]
    MissingStream { stream: SensorStream, path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Formats `x` with `digits` significant digits, trimming trailing zeros.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..digits as i32).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim(mantissa), exp)
    }
}

fn write_pose(out: &mut String, fields: &[f64], digits: Option<usize>) {
    let cells: Vec<String> = fields
        .iter()
        .map(|&v| match digits {
            Some(d) => format_significant(v, d),
            None => v.to_string(),
        })
        .collect();
    out.push_str(&cells.join(if digits.is_some() { " " } else { "," }));
    out.push('\n');
}

fn pose_fields(pose: &Pose3<f64>) -> [f64; 7] {
    let [w, x, y, z] = pose.rotation.wxyz();
    let t = pose.translation;
    [t.x, t.y, t.z, x, y, z, w]
}

fn pose_from_fields(f: &[f64]) -> Pose3<f64> {
    Pose3::new(Rotation3::from_wxyz(f[6], f[3], f[4], f[5]), Vector3::new(f[0], f[1], f[2]))
}

/// TUM trajectory text: `t x y z qx qy qz qw`, 9 significant digits. Header
/// lines are written as `# ` comments.
pub fn format_tum(poses: &[StampedPose<f64>], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for p in poses {
        let mut fields = vec![p.t];
        fields.extend(pose_fields(&p.pose));
        write_pose(&mut out, &fields, Some(9));
    }
    out
}

/// Splits non-empty, non-comment lines into numbers, reporting the 1-based
/// line of the first malformed entry.
fn parse_rows(text: &str, path: &Path, columns: usize, sep: char, header: Option<&str>) -> Result<Vec<(usize, Vec<f64>)>, IoError> {
    let mut rows = Vec::new();
    let mut header_seen = header.is_none();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fail = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !header_seen {
            let expected = header.expect("header expected");
            if trimmed != expected {
                return Err(fail(format!("expected header `{expected}`, found `{trimmed}`")));
            }
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = if sep == ' ' {
            trimmed.split_whitespace().collect()
        } else {
            trimmed.split(sep).map(str::trim).collect()
        };
        if cells.len() != columns {
            return Err(fail(format!("expected {columns} fields, found {}", cells.len())));
        }
        let mut values = Vec::with_capacity(columns);
        for c in cells {
            let v: f64 = c.parse().map_err(|_| fail(format!("invalid number `{c}`")))?;
            if !v.is_finite() {
                return Err(fail(format!("non-finite value `{c}`")));
            }
            values.push(v);
        }
        rows.push((line_no, values));
    }
    if !header_seen {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: text.lines().count().max(1),
            message: "missing header".into(),
        });
    }
    Ok(rows)
}

fn check_time_order(rows: &[(usize, Vec<f64>)], path: &Path) -> Result<(), IoError> {
    for w in rows.windows(2) {
        if w[1].1[0] < w[0].1[0] {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: w[1].0,
                message: "timestamps are not sorted".into(),
            });
        }
    }
    Ok(())
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Vec<StampedPose<f64>>, IoError> {
    let rows = parse_rows(text, path, 8, ' ', None)?;
    check_time_order(&rows, path)?;
    rows.iter()
        .map(|(line, r)| {
            let q = Vector3::new(r[4], r[5], r[6]).norm_squared() + r[7] * r[7];
            if q < 1e-12 {
                return Err(IoError::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: "zero quaternion".into(),
                });
            }
            Ok(StampedPose::new(r[0], pose_from_fields(&r[1..])))
        })
        .collect()
}

pub fn read_tum(path: &Path) -> Result<Vec<StampedPose<f64>>, IoError> {
    parse_tum(&read_text(path)?, path)
}

pub fn write_tum(path: &Path, poses: &[StampedPose<f64>], header: &[String]) -> Result<(), IoError> {
    write_text(path, &format_tum(poses, header))
}

/// The measurement streams of a sensor-log directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorStream {
    Imu,
    Mag,
    Flow,
    Lidar,
    Vio,
    Loops,
}

impl SensorStream {
    pub const ALL: [SensorStream; 6] = [Self::Imu, Self::Mag, Self::Flow, Self::Lidar, Self::Vio, Self::Loops];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Imu => "imu.csv",
            Self::Mag => "mag.csv",
            Self::Flow => "flow.csv",
            Self::Lidar => "lidar_odom.csv",
            Self::Vio => "vio_odom.csv",
            Self::Loops => "loops.csv",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Self::Imu => "t,gx,gy,gz,ax,ay,az",
            Self::Mag => "t,heading",
            Self::Flow => "t,vx,vy,height",
            Self::Lidar | Self::Vio | Self::Loops => "t_i,t_j,x,y,z,qx,qy,qz,qw",
        }
    }
}

impl std::fmt::Display for SensorStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Imu => "imu",
            Self::Mag => "mag",
            Self::Flow => "flow",
            Self::Lidar => "lidar",
            Self::Vio => "vio",
            Self::Loops => "loop",
        })
    }
}

pub const TRUTH_FILE: &str = "truth.tum";

fn csv<'a>(stream: SensorStream, rows: impl Iterator<Item = Vec<f64>> + 'a) -> String {
    let mut out = String::from(stream.header());
    out.push('\n');
    for r in rows {
        write_pose(&mut out, &r, None);
    }
    out
}

fn odom_rows(samples: &[OdomSample]) -> impl Iterator<Item = Vec<f64>> + '_ {
    samples.iter().map(|o| {
        let mut r = vec![o.t_from, o.t_to];
        r.extend(pose_fields(&o.relative));
        r
    })
}

/// Renders one stream as CSV. Values use the shortest round-trip
/// representation, so reading back reproduces them exactly.
pub fn format_stream(log: &SensorLog, stream: SensorStream) -> String {
    match stream {
        SensorStream::Imu => csv(
            stream,
            log.imu.iter().map(|s| vec![s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z]),
        ),
        SensorStream::Mag => csv(stream, log.mag.iter().map(|m| vec![m.t, m.heading])),
        SensorStream::Flow => csv(stream, log.flow.iter().map(|f| vec![f.t, f.vx, f.vy, f.height])),
        SensorStream::Lidar => csv(stream, odom_rows(&log.lidar)),
        SensorStream::Vio => csv(stream, odom_rows(&log.vio)),
        SensorStream::Loops => csv(stream, odom_rows(&log.loops)),
    }
}

/// Writes the six stream CSVs and `truth.tum` into `dir`.
pub fn write_sensor_log(dir: &Path, log: &SensorLog, truth_header: &[String]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for stream in SensorStream::ALL {
        write_text(&dir.join(stream.file_name()), &format_stream(log, stream))?;
    }
    let truth: Vec<_> = log.truth.iter().map(|s| StampedPose::new(s.t, s.state.pose)).collect();
    write_tum(&dir.join(TRUTH_FILE), &truth, truth_header)
}

/// Parses one stream's CSV text into `log`.
pub fn parse_stream(text: &str, path: &Path, stream: SensorStream, log: &mut SensorLog) -> Result<(), IoError> {
    let columns = stream.header().split(',').count();
    let rows = parse_rows(text, path, columns, ',', Some(stream.header()))?;
    let odom = |rows: &[(usize, Vec<f64>)]| -> Vec<OdomSample> {
        rows.iter()
            .map(|(_, r)| OdomSample {
                t_from: r[0],
                t_to: r[1],
                relative: pose_from_fields(&r[2..]),
            })
            .collect()
    };
    match stream {
        SensorStream::Imu => {
            check_time_order(&rows, path)?;
            log.imu = rows
                .iter()
                .map(|(_, r)| ImuSample {
                    t: r[0],
                    gyro: Vector3::new(r[1], r[2], r[3]),
                    accel: Vector3::new(r[4], r[5], r[6]),
                })
                .collect();
        }
        SensorStream::Mag => {
            check_time_order(&rows, path)?;
            log.mag = rows.iter().map(|(_, r)| MagSample { t: r[0], heading: r[1] }).collect();
        }
        SensorStream::Flow => {
            check_time_order(&rows, path)?;
            log.flow = rows
                .iter()
                .map(|(_, r)| FlowSample {
                    t: r[0],
                    vx: r[1],
                    vy: r[2],
                    height: r[3],
                })
                .collect();
        }
        SensorStream::Lidar => log.lidar = odom(&rows),
        SensorStream::Vio => log.vio = odom(&rows),
        SensorStream::Loops => log.loops = odom(&rows),
    }
    Ok(())
}

/// Loads a sensor-log directory. Streams listed in `required` must exist;
/// other missing streams are left empty. Ground truth is not loaded.
pub fn read_sensor_log(dir: &Path, required: &[SensorStream]) -> Result<SensorLog, IoError> {
    let mut log = SensorLog::default();
    for stream in SensorStream::ALL {
        let path = dir.join(stream.file_name());
        if !path.exists() {
            if required.contains(&stream) {
                return Err(IoError::MissingStream { stream, path });
            }
            continue;
        }
        parse_stream(&read_text(&path)?, &path, stream, &mut log)?;
    }
    Ok(log)
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> IoError + '_ {
    move |e| IoError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a binary (P5) 8-bit PGM as a polarization mosaic.
pub fn read_pgm_mosaic(path: &Path, layout: MosaicLayout) -> Result<PolarMosaic, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let malformed = |message: String| IoError::Image {
        path: path.to_path_buf(),
        message,
    };
    if !bytes.starts_with(b"P5") {
        return Err(malformed("not a binary PGM (P5) file".into()));
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).map_err(image_err(path))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(malformed(format!("expected 8-bit grayscale, found {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    PolarMosaic::new(w as usize, h as usize, img.into_raw(), layout).map_err(|e| malformed(e.to_string()))
}

fn save(path: &Path, data: &[u8], width: usize, height: usize, color: image::ExtendedColorType) -> Result<(), IoError> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let subtype = match color {
        image::ExtendedColorType::Rgb8 => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => PnmSubtype::Graymap(SampleEncoding::Binary),
    };
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .map_err(image_err(path))?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), IoError> {
    save(path, &image.data, image.width, image.height, image::ExtendedColorType::L8)
}

pub fn write_mosaic_pgm(path: &Path, mosaic: &PolarMosaic) -> Result<(), IoError> {
    save(path, &mosaic.samples, mosaic.width, mosaic.height, image::ExtendedColorType::L8)
}

pub fn write_ppm(path: &Path, rgb: &PolarRgb) -> Result<(), IoError> {
    save(path, &rgb.interleaved(), rgb.width, rgb.height, image::ExtendedColorType::Rgb8)
}

/// `x,y,score` with 6 decimals.
pub fn format_corners(corners: &[Corner]) -> String {
    let mut out = String::from("x,y,score\n");
    for c in corners {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", c.x, c.y, c.score);
    }
    out
}

pub fn parse_corners(text: &str, path: &Path) -> Result<Vec<Corner>, IoError> {
    Ok(parse_rows(text, path, 3, ',', Some("x,y,score"))?
        .into_iter()
        .map(|(_, r)| Corner {
            x: r[0],
            y: r[1],
            score: r[2],
        })
        .collect())
}

/// `t,innovation_rad,accepted` with `accepted` as 1 or 0.
pub fn format_gating(records: &[GateRecord]) -> String {
    let mut out = String::from("t,innovation_rad,accepted\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.t, r.innovation, r.accepted as u8);
    }
    out
}

pub fn parse_gating(text: &str, path: &Path) -> Result<Vec<GateRecord>, IoError> {
    Ok(parse_rows(text, path, 3, ',', Some("t,innovation_rad,accepted"))?
        .into_iter()
        .map(|(_, r)| GateRecord {
            t: r[0],
            innovation: r[1],
            accepted: r[2] != 0.0,
        })
        .collect())
}

/// One-row summary: `ate_rmse,rmse_x,rmse_y,rmse_z,length,pairs`, plus
/// `rotation_rmse_rad` when `rotation` is set.
pub fn format_report(report: &ErrorReport<f64>, rotation: bool) -> String {
    let mut out = String::from("ate_rmse,rmse_x,rmse_y,rmse_z,length,pairs");
    if rotation {
        out.push_str(",rotation_rmse_rad");
    }
    let _ = write!(
        out,
        "\n{},{},{},{},{},{}",
        report.ate_rmse,
        report.rmse_x,
        report.rmse_y,
        report.rmse_z,
        report.length,
        report.series.len()
    );
    if rotation {
        let _ = write!(out, ",{}", report.rotation_rmse);
    }
    out.push('\n');
    out
}

/// Per-pair error series `t,ex,ey,ez,e3d`, one row per associated pose.
pub fn format_error_series(report: &ErrorReport<f64>) -> String {
    let mut out = String::from("t,ex,ey,ez,e3d\n");
    for s in &report.series {
        let _ = writeln!(out, "{},{},{},{},{}", s.t, s.ex, s.ey, s.ez, s.e3d);
    }
    out
}

/// Human-readable summary.
pub fn format_summary(report: &ErrorReport<f64>, mode: AlignMode, rotation: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "alignment      {mode}");
    let _ = writeln!(out, "pairs          {}", report.series.len());
    let _ = writeln!(out, "length         {:.3} m", report.length);
    let _ = writeln!(out, "ATE RMSE       {:.6} m", report.ate_rmse);
    let _ = writeln!(
        out,
        "RMSE x/y/z     {:.6} / {:.6} / {:.6} m",
        report.rmse_x, report.rmse_y, report.rmse_z
    );
    let _ = writeln!(out, "max 3D error   {:.6} m", report.max_error());
    if rotation {
        let _ = writeln!(out, "rotation RMSE  {:.6} rad", report.rotation_rmse);
    }
    out
}

//! Division-of-focal-plane polarimetry: demosaicing, grayscale / DOP / AOP
//! planes, the packed polarized RGB image and per-channel corner detection.

use std::f64::consts::FRAC_PI_2;

use thiserror::Error;

use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolarError {
    #[error("image dimensions must be even, got {width}x{height}")]
    OddDimensions { width: usize, height: usize },
    #[error("sample buffer holds {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("mosaic layout must place each polarizer angle exactly once")]
    InvalidLayout,
    #[error("plane dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("image {width}x{height} smaller than the 16x16 minimum for corner detection")]
    ImageTooSmall { width: usize, height: usize },
    #[error("quality level {0} must lie in (0, 1)")]
    InvalidQuality(f64),
}

/// Polarizer orientation of one micro-polarizer pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolarAngle {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl PolarAngle {
    pub const ALL: [PolarAngle; 4] = [Self::Deg0, Self::Deg45, Self::Deg90, Self::Deg135];

    pub fn radians(self) -> f64 {
        match self {
            Self::Deg0 => 0.0,
            Self::Deg45 => std::f64::consts::FRAC_PI_4,
            Self::Deg90 => FRAC_PI_2,
            Self::Deg135 => 3.0 * std::f64::consts::FRAC_PI_4,
        }
    }

    fn index(self) -> usize {
        match self {
            Self::Deg0 => 0,
            Self::Deg45 => 1,
            Self::Deg90 => 2,
            Self::Deg135 => 3,
        }
    }
}

/// Which polarizer sits at each position of the 2x2 superpixel.
///
/// The default is the common commercial sensor arrangement:
///
/// ```text
///  90° | 45°
/// -----+-----
/// 135° |  0°
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MosaicLayout {
    pub top_left: PolarAngle,
    pub top_right: PolarAngle,
    pub bottom_left: PolarAngle,
    pub bottom_right: PolarAngle,
}

impl Default for MosaicLayout {
    fn default() -> Self {
        Self {
            top_left: PolarAngle::Deg90,
            top_right: PolarAngle::Deg45,
            bottom_left: PolarAngle::Deg135,
            bottom_right: PolarAngle::Deg0,
        }
    }
}

impl MosaicLayout {
    /// Angles in superpixel order: top-left, top-right, bottom-left, bottom-right.
    pub fn positions(&self) -> [PolarAngle; 4] {
        [
            self.top_left,
            self.top_right,
            self.bottom_left,
            self.bottom_right,
        ]
    }

    pub fn validate(&self) -> Result<(), PolarError> {
        let mut seen = [false; 4];
        for a in self.positions() {
            seen[a.index()] = true;
        }
        if seen.iter().all(|s| *s) {
            Ok(())
        } else {
            Err(PolarError::InvalidLayout)
        }
    }

    /// `(dx, dy)` offset of `angle` inside the superpixel.
    pub fn offset_of(&self, angle: PolarAngle) -> (usize, usize) {
        let pos = self
            .positions()
            .iter()
            .position(|a| *a == angle)
            .expect("validated layout contains every angle");
        (pos % 2, pos / 2)
    }
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<P> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<P>,
}

impl<P: Copy> Plane<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Result<Self, PolarError> {
        if data.len() != width * height {
            return Err(PolarError::BufferSize {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn map<Q>(&self, f: impl FnMut(P) -> Q) -> Plane<Q> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// 8-bit single-channel image.
pub type GrayImage = Plane<u8>;

/// Raw division-of-focal-plane frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarMosaic {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
    pub layout: MosaicLayout,
}

impl PolarMosaic {
    /// Full sensor resolution of the reference camera.
    pub const SENSOR_WIDTH: usize = 2448;
    pub const SENSOR_HEIGHT: usize = 2048;

    pub fn new(
        width: usize,
        height: usize,
        samples: Vec<u8>,
        layout: MosaicLayout,
    ) -> Result<Self, PolarError> {
        if width % 2 != 0 || height % 2 != 0 {
            return Err(PolarError::OddDimensions { width, height });
        }
        if samples.len() != width * height {
            return Err(PolarError::BufferSize {
                expected: width * height,
                got: samples.len(),
            });
        }
        layout.validate()?;
        Ok(Self {
            width,
            height,
            samples,
            layout,
        })
    }
}

/// Sample types accepted by the polarimetric formulas.
pub trait Sample: Copy {
    fn to_real<T: Real>(self) -> T;
}

impl Sample for u8 {
    fn to_real<T: Real>(self) -> T {
        lit(f64::from(self))
    }
}

impl Sample for f32 {
    fn to_real<T: Real>(self) -> T {
        lit(f64::from(self))
    }
}

impl Sample for f64 {
    fn to_real<T: Real>(self) -> T {
        lit(self)
    }
}

/// The four polarizer-filtered intensity planes at superpixel resolution.
///
/// Demosaiced sensor data uses `u8`; real-valued planes in the same
/// `[0, 255]` range are accepted for analysis without quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityPlanes<S = u8> {
    pub i0: Plane<S>,
    pub i45: Plane<S>,
    pub i90: Plane<S>,
    pub i135: Plane<S>,
}

impl<S: Copy> IntensityPlanes<S> {
    pub fn new(i0: Plane<S>, i45: Plane<S>, i90: Plane<S>, i135: Plane<S>) -> Result<Self, PolarError> {
        for p in [&i45, &i90, &i135] {
            if p.dims() != i0.dims() {
                return Err(PolarError::DimensionMismatch(i0.dims(), p.dims()));
            }
        }
        Ok(Self { i0, i45, i90, i135 })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.i0.dims()
    }

    /// `(I0, I45, I90, I135)` at one pixel.
    #[inline]
    pub fn pixel(&self, idx: usize) -> (S, S, S, S) {
        (
            self.i0.data[idx],
            self.i45.data[idx],
            self.i90.data[idx],
            self.i135.data[idx],
        )
    }

    fn per_pixel<Q>(&self, mut f: impl FnMut(S, S, S, S) -> Q) -> Plane<Q> {
        let (width, height) = self.dims();
        let data = (0..width * height)
            .map(|i| {
                let (a, b, c, d) = self.pixel(i);
                f(a, b, c, d)
            })
            .collect();
        Plane {
            width,
            height,
            data,
        }
    }
}

/// Splits the mosaic into its four half-resolution intensity planes.
pub fn demosaic(mosaic: &PolarMosaic) -> Result<IntensityPlanes<u8>, PolarError> {
    if mosaic.width % 2 != 0 || mosaic.height % 2 != 0 {
        return Err(PolarError::OddDimensions {
            width: mosaic.width,
            height: mosaic.height,
        });
    }
    mosaic.layout.validate()?;
    let (w, h) = (mosaic.width / 2, mosaic.height / 2);
    let plane_for = |angle: PolarAngle| {
        let (dx, dy) = mosaic.layout.offset_of(angle);
        Plane::from_fn(w, h, |u, v| {
            mosaic.samples[(2 * v + dy) * mosaic.width + 2 * u + dx]
        })
    };
    Ok(IntensityPlanes {
        i0: plane_for(PolarAngle::Deg0),
        i45: plane_for(PolarAngle::Deg45),
        i90: plane_for(PolarAngle::Deg90),
        i135: plane_for(PolarAngle::Deg135),
    })
}

/// Inverse of [`demosaic`]: interleaves four 8-bit planes into a mosaic.
pub fn remosaic(planes: &IntensityPlanes<u8>, layout: MosaicLayout) -> Result<PolarMosaic, PolarError> {
    layout.validate()?;
    let (w, h) = planes.dims();
    let mut samples = vec![0u8; 4 * w * h];
    for angle in PolarAngle::ALL {
        let plane = match angle {
            PolarAngle::Deg0 => &planes.i0,
            PolarAngle::Deg45 => &planes.i45,
            PolarAngle::Deg90 => &planes.i90,
            PolarAngle::Deg135 => &planes.i135,
        };
        let (dx, dy) = layout.offset_of(angle);
        for v in 0..h {
            for u in 0..w {
                samples[(2 * v + dy) * 2 * w + 2 * u + dx] = plane.get(u, v);
            }
        }
    }
    PolarMosaic::new(2 * w, 2 * h, samples, layout)
}

/// Grayscale value `½(g0+g1+g2+g3)`, rounded half away from zero and clamped to 255.
pub fn grayscale_pixel<S: Sample>(g0: S, g1: S, g2: S, g3: S) -> u8 {
    let sum: f64 = g0.to_real::<f64>() + g1.to_real::<f64>() + g2.to_real::<f64>() + g3.to_real::<f64>();
    (0.5 * sum).round().clamp(0.0, 255.0) as u8
}

pub fn grayscale<S: Sample>(planes: &IntensityPlanes<S>) -> GrayImage {
    planes.per_pixel(grayscale_pixel)
}

/// Degree of polarization in `[0, 1]`; an all-dark pixel yields 0.
pub fn dop_pixel<T: Real>(i0: T, i45: T, i90: T, i135: T) -> T {
    let total = i0 + i45 + i90 + i135;
    if total <= T::zero() {
        return T::zero();
    }
    let a = i0 - i90;
    let b = i45 - i135;
    let d = lit::<T>(2.0) * (a * a + b * b).sqrt() / total;
    d.min(T::one())
}

pub fn dop<T: Real, S: Sample>(planes: &IntensityPlanes<S>) -> Plane<T> {
    planes.per_pixel(|a, b, c, d| dop_pixel(a.to_real(), b.to_real(), c.to_real(), d.to_real()))
}

/// Angle of polarization in `(-pi/2, pi/2]` and a validity flag.
///
/// The pixel is invalid (and reported as 0) when both `I0 - I90` and
/// `I45 - I135` vanish.
pub fn aop_pixel<T: Real>(i0: T, i45: T, i90: T, i135: T) -> (T, bool) {
    let y = i45 - i135;
    let x = i0 - i90;
    if x == T::zero() && y == T::zero() {
        return (T::zero(), false);
    }
    let half_pi = T::FRAC_PI_2();
    let theta = y.atan2(x) * lit::<T>(0.5);
    (if theta <= -half_pi { half_pi } else { theta }, true)
}

/// AOP plane together with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AopPlane<T> {
    pub angle: Plane<T>,
    pub valid: Plane<bool>,
}

pub fn aop<T: Real, S: Sample>(planes: &IntensityPlanes<S>) -> AopPlane<T> {
    let both = planes.per_pixel(|a, b, c, d| aop_pixel::<T>(a.to_real(), b.to_real(), c.to_real(), d.to_real()));
    AopPlane {
        angle: both.map(|(t, _)| t),
        valid: both.map(|(_, v)| v),
    }
}

fn to_u8<T: Real>(x: T) -> u8 {
    x.round().to_u8().expect("mapped value within 0..=255")
}

/// `g_d = -255 d² + 510 d`, rounded half away from zero.
pub fn map_dop<T: Real>(d: T) -> Result<u8, PolarError> {
    if !(d >= T::zero() && d <= T::one()) {
        return Err(PolarError::OutOfRange {
            value: d.to_f64().unwrap_or(f64::NAN),
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(to_u8(-lit::<T>(255.0) * d * d + lit::<T>(510.0) * d))
}

/// `g_θ = (θ + pi/2)·255/pi`, rounded half away from zero.
pub fn map_aop<T: Real>(theta: T) -> Result<u8, PolarError> {
    let half_pi = T::FRAC_PI_2();
    if !(theta >= -half_pi && theta <= half_pi) {
        return Err(PolarError::OutOfRange {
            value: theta.to_f64().unwrap_or(f64::NAN),
            lo: -FRAC_PI_2,
            hi: FRAC_PI_2,
        });
    }
    Ok(to_u8((theta + half_pi) * lit::<T>(255.0) / T::PI()))
}

/// Packed polarized image: R = mapped DOP, G = grayscale, B = mapped AOP.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarRgb {
    pub width: usize,
    pub height: usize,
    pub r: Vec<u8>,
    pub g: Vec<u8>,
    pub b: Vec<u8>,
}

impl PolarRgb {
    /// Output resolution for a full-sensor frame.
    pub const DEFAULT_WIDTH: usize = PolarMosaic::SENSOR_WIDTH / 2;
    pub const DEFAULT_HEIGHT: usize = PolarMosaic::SENSOR_HEIGHT / 2;

    fn channel(&self, data: &[u8]) -> GrayImage {
        Plane {
            width: self.width,
            height: self.height,
            data: data.to_vec(),
        }
    }

    pub fn red(&self) -> GrayImage {
        self.channel(&self.r)
    }

    pub fn green(&self) -> GrayImage {
        self.channel(&self.g)
    }

    pub fn blue(&self) -> GrayImage {
        self.channel(&self.b)
    }

    /// Returns the `(R, G, B)` planes.
    pub fn unpack(&self) -> (GrayImage, GrayImage, GrayImage) {
        (self.red(), self.green(), self.blue())
    }

    /// Interleaved `RGBRGB...` bytes.
    pub fn interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.r.len());
        for i in 0..self.r.len() {
            out.extend_from_slice(&[self.r[i], self.g[i], self.b[i]]);
        }
        out
    }
}

pub fn pack_rgb(dop: &GrayImage, gray: &GrayImage, aop: &GrayImage) -> Result<PolarRgb, PolarError> {
    for p in [gray, aop] {
        if p.dims() != dop.dims() {
            return Err(PolarError::DimensionMismatch(dop.dims(), p.dims()));
        }
    }
    Ok(PolarRgb {
        width: dop.width,
        height: dop.height,
        r: dop.data.clone(),
        g: gray.data.clone(),
        b: aop.data.clone(),
    })
}

/// Everything the pipeline derives from one set of intensity planes.
#[derive(Debug, Clone)]
pub struct PolarProducts {
    pub rgb: PolarRgb,
    pub aop_valid: Plane<bool>,
}

/// Runs grayscale, DOP and AOP computation, mapping and packing.
pub fn process<S: Sample>(planes: &IntensityPlanes<S>) -> PolarProducts {
    let gray = grayscale(planes);
    let dop_plane = dop::<f64, S>(planes).map(|d| map_dop(d).expect("dop is clamped to [0, 1]"));
    let aop_plane = aop::<f64, S>(planes);
    let aop_mapped = aop_plane
        .angle
        .map(|t| map_aop(t).expect("aop lies in (-pi/2, pi/2]"));
    PolarProducts {
        rgb: pack_rgb(&dop_plane, &gray, &aop_mapped).expect("planes share dimensions"),
        aop_valid: aop_plane.valid,
    }
}

/// A detected corner at sub-pixel position `(x, y)` (pixel centres are integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerParams {
    /// Fraction of the strongest response a corner must reach.
    pub quality_level: f64,
    /// Upper bound on returned corners; 0 means unbounded.
    pub max_corners: usize,
    pub min_distance: f64,
}

impl Default for CornerParams {
    fn default() -> Self {
        Self {
            quality_level: 0.9,
            max_corners: 500,
            min_distance: 5.0,
        }
    }
}

pub const MIN_CORNER_IMAGE: usize = 16;
/// Pixels at the border without a full Sobel + window support.
const BORDER: usize = 2;

/// Minimum-eigenvalue structure-tensor response: 3x3 Sobel gradients
/// summed over a 3x3 window. Border pixels carry zero.
pub fn min_eigen_response(image: &GrayImage) -> Plane<f64> {
    let (w, h) = image.dims();
    let mut gxx = vec![0.0; w * h];
    let mut gyy = vec![0.0; w * h];
    let mut gxy = vec![0.0; w * h];
    let px = |x: usize, y: usize| f64::from(image.get(x, y));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let i = y * w + x;
            gxx[i] = gx * gx;
            gyy[i] = gy * gy;
            gxy[i] = gx * gy;
        }
    }
    let mut out = Plane::filled(w, h, 0.0);
    for y in BORDER..h.saturating_sub(BORDER) {
        for x in BORDER..w.saturating_sub(BORDER) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let i = yy * w + xx;
                    a += gxx[i];
                    b += gxy[i];
                    c += gyy[i];
                }
            }
            let half_trace = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            out.data[y * w + x] = (half_trace - disc).max(0.0);
        }
    }
    out
}

fn check_detect_args(image: &GrayImage, params: &CornerParams) -> Result<(), PolarError> {
    if image.width < MIN_CORNER_IMAGE || image.height < MIN_CORNER_IMAGE {
        return Err(PolarError::ImageTooSmall {
            width: image.width,
            height: image.height,
        });
    }
    if !(params.quality_level > 0.0 && params.quality_level < 1.0) {
        return Err(PolarError::InvalidQuality(params.quality_level));
    }
    Ok(())
}

fn parabolic_offset(left: f64, centre: f64, right: f64) -> f64 {
    let den = left - 2.0 * centre + right;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / den).clamp(-0.5, 0.5)
}

fn too_close(accepted: &[Corner], x: f64, y: f64, min_distance: f64) -> bool {
    let d2 = min_distance * min_distance;
    accepted.iter().any(|c| {
        let (dx, dy) = (c.x - x, c.y - y);
        dx * dx + dy * dy < d2
    })
}

/// Detects corners on one 8-bit channel.
///
/// Candidates are 3x3 local maxima of [`min_eigen_response`] scoring at least
/// `quality_level` times the global maximum. They are visited in order of
/// descending score (ties by x, then y) and greedily accepted when no
/// earlier corner lies within `min_distance`. Accepted corners are refined
/// to sub-pixel accuracy with a per-axis parabola fit.
pub fn detect_corners(image: &GrayImage, params: &CornerParams) -> Result<Vec<Corner>, PolarError> {
    check_detect_args(image, params)?;
    let response = min_eigen_response(image);
    let (w, h) = response.dims();
    let max = response.data.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let threshold = params.quality_level * max;

    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let s = response.get(x, y);
            if s <= 0.0 || s < threshold {
                continue;
            }
            let is_max = (y - 1..=y + 1)
                .all(|yy| (x - 1..=x + 1).all(|xx| response.get(xx, yy) <= s));
            if is_max {
                candidates.push((x, y, s));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    // Suppression runs on integer positions so that raising the quality
    // level only ever drops trailing candidates.
    let mut kept: Vec<Corner> = Vec::new();
    for (x, y, score) in candidates {
        if params.max_corners > 0 && kept.len() >= params.max_corners {
            break;
        }
        if too_close(&kept, x as f64, y as f64, params.min_distance) {
            continue;
        }
        kept.push(Corner {
            x: x as f64,
            y: y as f64,
            score,
        });
    }
    for c in &mut kept {
        let (x, y) = (c.x as usize, c.y as usize);
        c.x += parabolic_offset(response.get(x - 1, y), c.score, response.get(x + 1, y));
        c.y += parabolic_offset(response.get(x, y - 1), c.score, response.get(x, y + 1));
    }
    Ok(kept)
}

/// Grayscale corners supplemented by corners from the DOP (R) and AOP (B)
/// channels.
///
/// Channels are merged in the order G, R, B; a corner from a later channel
/// is dropped when it lies within `min_distance` of one already kept. The
/// merged list keeps that precedence order and is capped at `max_corners`.
pub fn detect_enhanced(image: &PolarRgb, params: &CornerParams) -> Result<Vec<Corner>, PolarError> {
    let (r, g, b) = image.unpack();
    let mut merged = detect_corners(&g, params)?;
    for channel in [&r, &b] {
        for c in detect_corners(channel, params)? {
            if params.max_corners > 0 && merged.len() >= params.max_corners {
                return Ok(merged);
            }
            if !too_close(&merged, c.x, c.y, params.min_distance) {
                merged.push(c);
            }
        }
    }
    if params.max_corners > 0 {
        merged.truncate(params.max_corners);
    }
    Ok(merged)
}

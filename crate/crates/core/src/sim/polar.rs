use std::f64::consts::FRAC_PI_2;

use super::SimError;
use crate::polarimetry::{remosaic, IntensityPlanes, MosaicLayout, Plane, PolarAngle, PolarMosaic};

/// Unpolarized-plus-linear light at one pixel: total intensity `s`, degree
/// `dop` and angle `aop` of linear polarization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarValue {
    pub intensity: f64,
    pub dop: f64,
    pub aop: f64,
}

impl PolarValue {
    pub fn new(intensity: f64, dop: f64, aop: f64) -> Self {
        Self { intensity, dop, aop }
    }

    /// Malus-law intensity behind a polarizer at `angle`.
    pub fn through(&self, angle: PolarAngle) -> f64 {
        let phi = angle.radians();
        self.intensity / 4.0 * (1.0 + self.dop * (2.0 * self.aop - 2.0 * phi).cos())
    }
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in intensity-plane pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub value: PolarValue,
}

/// Piecewise-constant scene; later regions paint over earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarScene {
    /// Intensity-plane size; the mosaic is twice as large in each direction.
    pub width: usize,
    pub height: usize,
    pub background: PolarValue,
    pub regions: Vec<PolarRegion>,
}

impl PolarScene {
    pub fn uniform(width: usize, height: usize, value: PolarValue) -> Self {
        Self {
            width,
            height,
            background: value,
            regions: Vec::new(),
        }
    }

    /// Checkerboard of `cell`-pixel squares alternating between `a` and `b`.
    pub fn checkerboard(width: usize, height: usize, cell: usize, a: PolarValue, b: PolarValue) -> Self {
        let mut regions = Vec::new();
        let cell = cell.max(1);
        for cy in 0..height.div_ceil(cell) {
            for cx in 0..width.div_ceil(cell) {
                if (cx + cy) % 2 == 1 {
                    regions.push(PolarRegion {
                        x0: cx * cell,
                        y0: cy * cell,
                        x1: ((cx + 1) * cell).min(width),
                        y1: ((cy + 1) * cell).min(height),
                        value: b,
                    });
                }
            }
        }
        Self {
            width,
            height,
            background: a,
            regions,
        }
    }

    pub fn value_at(&self, x: usize, y: usize) -> PolarValue {
        self.regions
            .iter()
            .rev()
            .find(|r| x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1)
            .map_or(self.background, |r| r.value)
    }

    fn validate(&self) -> Result<(), SimError> {
        let check = |index: usize, v: &PolarValue| -> Result<(), SimError> {
            let fail = |reason: String| Err(SimError::InvalidRegion { index, reason });
            if !(0.0..=510.0).contains(&v.intensity) {
                return fail(format!("intensity {} outside [0, 510]", v.intensity));
            }
            if !(0.0..=1.0).contains(&v.dop) {
                return fail(format!("dop {} outside [0, 1]", v.dop));
            }
            if !(v.aop > -FRAC_PI_2 && v.aop <= FRAC_PI_2) {
                return fail(format!("aop {} outside (-π/2, π/2]", v.aop));
            }
            Ok(())
        };
        check(0, &self.background)?;
        for (i, r) in self.regions.iter().enumerate() {
            check(i + 1, &r.value)?;
            if r.x0 > r.x1 || r.y0 > r.y1 {
                return Err(SimError::InvalidRegion {
                    index: i + 1,
                    reason: "empty or inverted rectangle".into(),
                });
            }
        }
        Ok(())
    }
}

/// Real-valued intensity planes of the scene, before quantization.
pub fn malus_planes(scene: &PolarScene) -> Result<IntensityPlanes<f64>, SimError> {
    scene.validate()?;
    let plane = |angle| Plane::from_fn(scene.width, scene.height, |x, y| scene.value_at(x, y).through(angle));
    Ok(IntensityPlanes::new(
        plane(PolarAngle::Deg0),
        plane(PolarAngle::Deg45),
        plane(PolarAngle::Deg90),
        plane(PolarAngle::Deg135),
    )
    .expect("planes share the scene dimensions"))
}

/// Renders the scene as an 8-bit division-of-focal-plane mosaic.
pub fn synthesize_polar_scene(scene: &PolarScene, layout: MosaicLayout) -> Result<PolarMosaic, SimError> {
    let planes = malus_planes(scene)?;
    let q = |p: &Plane<f64>| p.map(|v| v.round().clamp(0.0, 255.0) as u8);
    let quantized = IntensityPlanes::new(q(&planes.i0), q(&planes.i45), q(&planes.i90), q(&planes.i135))
        .expect("planes share the scene dimensions");
    remosaic(&quantized, layout).map_err(|e| SimError::InvalidScenario(e.to_string()))
}

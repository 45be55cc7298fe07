use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use super::{angles_from_normal, normal_from_angles};
use crate::error::{Error, Result};
use crate::normal_map::NormalMap;

/// Analytic surface layouts with closed-form normals.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    /// A single tilted plane covering the sensor.
    Plane { azimuth: f64, zenith: f64 },
    /// Front-facing spherical cap centred at pixel coordinates `(cx, cy)` with
    /// sphere radius `radius` (pixels), cut off at `max_zenith`. Pixels outside
    /// the cap are background.
    SphereCap {
        cx: f64,
        cy: f64,
        radius: f64,
        max_zenith: f64,
    },
    /// Fixed azimuth with zenith varying linearly across the columns.
    Ramp {
        azimuth: f64,
        zenith_start: f64,
        zenith_end: f64,
    },
    /// A spherical cap in front of a tilted plane; every pixel is valid.
    Composite {
        plane_azimuth: f64,
        plane_zenith: f64,
        cx: f64,
        cy: f64,
        radius: f64,
        max_zenith: f64,
    },
}

impl Geometry {
    /// A sphere cap of random size and position in front of a randomly tilted
    /// plane, fitted to a `width x height` sensor.
    pub fn random_composite<R: Rng>(rng: &mut R, width: usize, height: usize) -> Self {
        let side = width.min(height) as f64;
        let radius = rng.gen_range(0.25..0.42) * side;
        Geometry::Composite {
            plane_azimuth: rng.gen_range(0.0..2.0 * PI),
            plane_zenith: rng.gen_range(10f64..50.0).to_radians(),
            cx: rng.gen_range(radius * 0.8..width as f64 - radius * 0.8),
            cy: rng.gen_range(radius * 0.8..height as f64 - radius * 0.8),
            radius,
            max_zenith: rng.gen_range(60f64..80.0).to_radians(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Geometry::Plane { .. } => "plane",
            Geometry::SphereCap { .. } => "sphere-cap",
            Geometry::Ramp { .. } => "ramp",
            Geometry::Composite { .. } => "composite",
        }
    }

    fn validate(&self) -> Result<()> {
        let zenith_ok = |z: f64| (0.0..=FRAC_PI_2).contains(&z);
        let ok = match *self {
            Geometry::Plane { zenith, .. } => zenith_ok(zenith),
            Geometry::SphereCap {
                radius, max_zenith, ..
            } => radius > 0.0 && zenith_ok(max_zenith),
            Geometry::Ramp {
                zenith_start,
                zenith_end,
                ..
            } => zenith_ok(zenith_start) && zenith_ok(zenith_end),
            Geometry::Composite {
                plane_zenith,
                radius,
                max_zenith,
                ..
            } => zenith_ok(plane_zenith) && radius > 0.0 && zenith_ok(max_zenith),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} geometry: {self:?}", self.kind())))
        }
    }

    /// Normal at pixel centre `(x + 0.5, y + 0.5)`, or `None` for background.
    fn normal_at(&self, x: usize, y: usize, width: usize) -> Option<[f64; 3]> {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let cap = |cx: f64, cy: f64, radius: f64, max_zenith: f64| {
            let (dx, dy) = ((px - cx) / radius, (py - cy) / radius);
            let r2 = dx * dx + dy * dy;
            let limit = max_zenith.sin();
            if r2 <= limit * limit && r2 < 1.0 {
                Some([dx, dy, (1.0 - r2).sqrt()])
            } else {
                None
            }
        };
        match *self {
            Geometry::Plane { azimuth, zenith } => normal_from_angles(azimuth, zenith).ok(),
            Geometry::SphereCap {
                cx,
                cy,
                radius,
                max_zenith,
            } => cap(cx, cy, radius, max_zenith),
            Geometry::Ramp {
                azimuth,
                zenith_start,
                zenith_end,
            } => {
                let f = px / width as f64;
                normal_from_angles(azimuth, zenith_start + (zenith_end - zenith_start) * f).ok()
            }
            Geometry::Composite {
                plane_azimuth,
                plane_zenith,
                cx,
                cy,
                radius,
                max_zenith,
            } => cap(cx, cy, radius, max_zenith)
                .or_else(|| normal_from_angles(plane_azimuth, plane_zenith).ok()),
        }
    }
}

/// Lambertian shading used for the unpolarized radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct LightModel {
    /// Direction towards the light; normalized on use.
    pub direction: [f64; 3],
    pub ambient: f64,
    pub albedo: f64,
    /// Unpolarized radiance of background pixels.
    pub background: f64,
}

impl Default for LightModel {
    fn default() -> Self {
        Self {
            direction: [0.5, -0.35, 1.0],
            ambient: 0.25,
            albedo: 0.8,
            background: 0.1,
        }
    }
}

impl LightModel {
    fn shade(&self, n: [f64; 3]) -> f64 {
        let d = self.direction;
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let lambert = ((n[0] * d[0] + n[1] * d[1] + n[2] * d[2]) / len).max(0.0);
        self.albedo * (self.ambient + (1.0 - self.ambient) * lambert)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePixel {
    /// Radians in `[0, 2 pi)`.
    pub azimuth: f64,
    /// Radians in `[0, pi / 2]`.
    pub zenith: f64,
    /// Unpolarized radiance, strictly positive.
    pub intensity: f64,
    pub refractive_index: f64,
    /// False for background pixels that carry no ground truth.
    pub valid: bool,
}

/// Per-pixel ground truth and radiance for one synthetic capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub geometry: Geometry,
    pub refractive_index: f64,
    pixels: Vec<ScenePixel>,
}

impl Scene {
    pub fn new(
        width: usize,
        height: usize,
        geometry: Geometry,
        light: &LightModel,
        refractive_index: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        if width == 0 || height == 0 || width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(Error::Config(format!("unsupported sensor size {width}x{height}")));
        }
        if refractive_index <= 1.0 {
            return Err(Error::Config(format!(
                "refractive index must exceed 1, got {refractive_index}"
            )));
        }
        if light.background <= 0.0 || light.albedo <= 0.0 || light.ambient <= 0.0 {
            return Err(Error::Config("light model must yield positive radiance".into()));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let px = match geometry.normal_at(x, y, width) {
                    Some(n) => {
                        let (azimuth, zenith) = angles_from_normal(n);
                        ScenePixel {
                            azimuth,
                            zenith: zenith.min(FRAC_PI_2),
                            intensity: light.shade(n),
                            refractive_index,
                            valid: true,
                        }
                    }
                    None => ScenePixel {
                        azimuth: 0.0,
                        zenith: 0.0,
                        intensity: light.background,
                        refractive_index,
                        valid: false,
                    },
                };
                pixels.push(px);
            }
        }
        Ok(Self {
            width,
            height,
            geometry,
            refractive_index,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &ScenePixel {
        &self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[ScenePixel] {
        &self.pixels
    }

    /// Mutable access for custom scenes (e.g. hand-built test pixels).
    pub fn pixels_mut(&mut self) -> &mut [ScenePixel] {
        &mut self.pixels
    }

    /// Ground-truth normals; background pixels are zero and masked out.
    pub fn normal_map(&self) -> NormalMap {
        let mut map = NormalMap::constant(self.width, self.height, [0.0, 0.0, 0.0]);
        for (p, px) in self.pixels.iter().enumerate() {
            map.mask[p] = px.valid;
            if px.valid {
                let n = normal_from_angles(px.azimuth, px.zenith).expect("zenith in range");
                map.set(p, [n[0] as f32, n[1] as f32, n[2] as f32]);
            }
        }
        map
    }
}

/// Mean zenith over a spherical cap of angular radius `max_zenith` under
/// orthographic projection (area-weighted over the image disk).
pub fn analytic_cap_mean_zenith(max_zenith: f64) -> f64 {
    // (2 / s^2) * integral_0^s asin(r) r dr with s = sin(max_zenith)
    let s = max_zenith.sin();
    if s == 0.0 {
        return 0.0;
    }
    let antideriv = |r: f64| 0.5 * r * r * r.asin() - 0.25 * (r.asin() - r * (1.0 - r * r).sqrt());
    2.0 * antideriv(s) / (s * s)
}

//! Polarization events and a rotating-polarizer event camera over analytic scenes.
//!
//! A linear polarizer spinning in front of the sensor modulates the radiance of
//! each pixel sinusoidally with period `pi` in the polarizer angle. The phase of
//! that sinusoid is the surface azimuth and its amplitude is the degree of linear
//! polarization, which grows with the zenith angle. The simulator turns this
//! modulation into contrast-threshold events.

mod io;
mod scene;
mod simulator;

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

pub use io::{
    read_events, read_image, read_normals, write_events, write_image, write_normals,
};
pub use scene::{analytic_cap_mean_zenith, Geometry, LightModel, Scene, ScenePixel};
pub use simulator::{simulate_events, simulate_pixel, PixelTrace, SimulationOutput, SimulatorConfig};

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    /// `-1` or `+1`.
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: i8) -> Result<Self> {
        if p != 1 && p != -1 {
            return Err(Error::Domain(format!("event polarity must be +1 or -1, got {p}")));
        }
        Ok(Self { x, y, t, p })
    }
}

/// Time-sorted events from a `width x height` sensor over `[t0, t0 + duration]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub t0: u64,
    pub duration: u64,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and ordering.
    pub fn new(width: usize, height: usize, t0: u64, duration: u64, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::Domain(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::Domain(format!("event {i} has polarity {}", e.p)));
            }
            if e.t < t0 || e.t > t0 + duration {
                return Err(Error::Domain(format!(
                    "event {i} at t={} outside window [{t0}, {}]",
                    e.t,
                    t0 + duration
                )));
            }
        }
        if events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::Domain("events are not sorted by timestamp".into()));
        }
        Ok(Self {
            width,
            height,
            t0,
            duration,
            events,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Event count per pixel, row-major.
    pub fn counts_per_pixel(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.width * self.height];
        for e in &self.events {
            counts[e.y as usize * self.width + e.x as usize] += 1;
        }
        counts
    }
}

/// Unit normal `(sin(zenith) cos(azimuth), sin(zenith) sin(azimuth), cos(zenith))`.
pub fn normal_from_angles(azimuth: f64, zenith: f64) -> Result<[f64; 3]> {
    if !(0.0..=FRAC_PI_2).contains(&zenith) {
        return Err(Error::Domain(format!(
            "zenith {zenith} rad outside [0, pi/2]"
        )));
    }
    let (sz, cz) = zenith.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Ok([sz * ca, sz * sa, cz])
}

/// Inverse of [`normal_from_angles`] for a unit vector with `z >= 0`; azimuth is
/// wrapped into `[0, 2 pi)`.
pub fn angles_from_normal(n: [f64; 3]) -> (f64, f64) {
    let zenith = n[2].clamp(-1.0, 1.0).acos();
    let mut azimuth = n[1].atan2(n[0]);
    if azimuth < 0.0 {
        azimuth += 2.0 * PI;
    }
    if azimuth >= 2.0 * PI {
        azimuth = 0.0;
    }
    (azimuth, zenith)
}

/// Degree of linear polarization of diffusely reflected light for zenith angle
/// `zenith` and refractive index `n`.
pub fn diffuse_dolp(zenith: f64, n: f64) -> f64 {
    let s2 = zenith.sin().powi(2);
    let a = n - 1.0 / n;
    let b = n + 1.0 / n;
    let num = a * a * s2;
    let den = 2.0 + 2.0 * n * n - b * b * s2 + 4.0 * zenith.cos() * (n * n - s2).sqrt();
    num / den
}

/// Radiance behind a linear polarizer at `polarizer_angle`:
/// `I_un / 2 * (1 + rho * cos(2 phi - 2 azimuth))`.
pub fn polarized_intensity(pixel: &ScenePixel, polarizer_angle: f64) -> f64 {
    let rho = diffuse_dolp(pixel.zenith, pixel.refractive_index);
    0.5 * pixel.intensity * (1.0 + rho * (2.0 * polarizer_angle - 2.0 * pixel.azimuth).cos())
}

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{polarized_intensity, Event, EventStream, Scene, ScenePixel};
use crate::error::{Error, Result};
use crate::normal_map::{Image, NormalMap};

/// Rotating-polarizer event camera settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorConfig {
    /// Contrast threshold in log-intensity units.
    pub contrast_threshold: f64,
    /// Polarizer angular speed in radians per microsecond.
    pub angular_speed: f64,
    /// Total polarizer rotation in radians.
    pub total_rotation: f64,
    /// Polarizer angle increment between radiance samples, radians.
    pub sampling_step: f64,
    pub seed: u64,
    /// Relative half-width of a uniform per-crossing threshold perturbation.
    /// Zero disables noise.
    pub threshold_jitter: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.05,
            // half a turn in 100 ms
            angular_speed: PI / 100_000.0,
            total_rotation: PI,
            sampling_step: PI / 180.0,
            seed: 0,
            threshold_jitter: 0.0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_threshold > 0.0) {
            return Err(Error::Config(format!(
                "contrast threshold must be positive, got {}",
                self.contrast_threshold
            )));
        }
        if !(self.angular_speed > 0.0) || !(self.total_rotation > 0.0) {
            return Err(Error::Config("angular speed and total rotation must be positive".into()));
        }
        if !(self.sampling_step > 0.0) || self.sampling_step > self.total_rotation {
            return Err(Error::Config(format!(
                "sampling step {} must lie in (0, total rotation {}]",
                self.sampling_step, self.total_rotation
            )));
        }
        if !(0.0..1.0).contains(&self.threshold_jitter) {
            return Err(Error::Config("threshold jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Length of the capture window in microseconds.
    pub fn duration_us(&self) -> u64 {
        (self.total_rotation / self.angular_speed).round() as u64
    }

    fn sample_angles(&self) -> Vec<f64> {
        let steps = (self.total_rotation / self.sampling_step - 1e-9).ceil() as usize;
        (0..=steps)
            .map(|k| (k as f64 * self.sampling_step).min(self.total_rotation))
            .collect()
    }
}

/// Events of one pixel before quantization, with the log-intensity reference
/// level reached at each crossing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelTrace {
    /// `(time_us, polarity, reference level after the crossing)`.
    pub crossings: Vec<(f64, i8, f64)>,
    /// Log-intensity at the first sample.
    pub initial_level: f64,
}

/// Sweeps the polarizer over one pixel and records every threshold crossing.
/// Crossing times are linearly interpolated inside the sampling step.
pub fn simulate_pixel<R: Rng>(pixel: &ScenePixel, config: &SimulatorConfig, rng: Option<&mut R>) -> Result<PixelTrace> {
    let angles = config.sample_angles();
    let mut rng = rng;
    let log_at = |phi: f64| -> Result<f64> {
        let i = polarized_intensity(pixel, phi);
        if !(i > 0.0) || !i.is_finite() {
            return Err(Error::Simulation(format!(
                "non-positive intensity {i} at polarizer angle {phi}"
            )));
        }
        Ok(i.ln())
    };
    let mut prev = log_at(angles[0])?;
    let mut reference = prev;
    let mut trace = PixelTrace {
        crossings: Vec::new(),
        initial_level: prev,
    };
    let threshold = |rng: &mut Option<&mut R>| -> f64 {
        match rng.as_deref_mut() {
            Some(r) if config.threshold_jitter > 0.0 => {
                let u: f64 = r.gen_range(-1.0..=1.0);
                config.contrast_threshold * (1.0 + config.threshold_jitter * u)
            }
            _ => config.contrast_threshold,
        }
    };
    let mut c = threshold(&mut rng);
    for w in angles.windows(2) {
        let next = log_at(w[1])?;
        let (t_a, t_b) = (w[0] / config.angular_speed, w[1] / config.angular_speed);
        while (next - reference).abs() >= c {
            let p: i8 = if next > reference { 1 } else { -1 };
            let level = reference + p as f64 * c;
            let frac = if next != prev {
                ((level - prev) / (next - prev)).clamp(0.0, 1.0)
            } else {
                1.0
            };
            trace.crossings.push((t_a + frac * (t_b - t_a), p, level));
            reference = level;
            c = threshold(&mut rng);
        }
        prev = next;
    }
    Ok(trace)
}

/// Everything one synthetic capture produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub events: EventStream,
    pub normals: NormalMap,
    /// Radiance behind the polarizer at angle 0.
    pub intensity0: Image,
}

/// Simulates a full sensor. Pixels are independent; each gets its own random
/// stream derived from the seed, and the merged stream is stably sorted on
/// `(t, y, x)`, so the output does not depend on evaluation order.
pub fn simulate_events(scene: &Scene, config: &SimulatorConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let duration = config.duration_us();
    let mut events = Vec::new();
    let mut intensity0 = Image::zeros(scene.width, scene.height);
    for y in 0..scene.height {
        for x in 0..scene.width {
            let pixel = scene.pixel(x, y);
            let idx = y * scene.width + x;
            intensity0.data[idx] = polarized_intensity(pixel, 0.0) as f32;
            let trace = if config.threshold_jitter > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(idx as u64);
                simulate_pixel(pixel, config, Some(&mut rng))?
            } else {
                simulate_pixel::<ChaCha8Rng>(pixel, config, None)?
            };
            for (t, p, _) in trace.crossings {
                let t = (t.round() as u64).min(duration);
                events.push(Event {
                    x: x as u16,
                    y: y as u16,
                    t,
                    p,
                });
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    Ok(SimulationOutput {
        events: EventStream::new(scene.width, scene.height, 0, duration, events)?,
        normals: scene.normal_map(),
        intensity0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::{Geometry, LightModel};

    fn pixel(azimuth: f64, zenith: f64) -> ScenePixel {
        ScenePixel {
            azimuth,
            zenith,
            intensity: 0.7,
            refractive_index: 1.5,
            valid: true,
        }
    }

    #[test]
    fn flat_pixel_emits_nothing() {
        let trace = simulate_pixel::<ChaCha8Rng>(&pixel(0.3, 0.0), &SimulatorConfig::default(), None).unwrap();
        assert!(trace.crossings.is_empty());
    }

    #[test]
    fn monotone_rise_of_three_thresholds() {
        // Over a quarter turn starting at phi = azimuth + pi/2 the radiance rises
        // monotonically from its minimum to its maximum. Choose the zenith so that
        // the log swing is exactly 3C (plus a hair to beat rounding).
        let c: f64 = 0.05;
        let target = 3.0 * c + 1e-9;
        // ln((1 + rho) / (1 - rho)) = 2 atanh(rho) = target
        let rho = (target / 2.0).tanh();
        let n = 1.5f64;
        let mut lo = 0.0;
        let mut hi = std::f64::consts::FRAC_PI_2;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if crate::event_model::diffuse_dolp(mid, n) < rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let zenith = 0.5 * (lo + hi);
        // azimuth pi/2 puts the minimum at phi = 0 and the maximum at phi = pi/2
        let px = pixel(PI / 2.0, zenith);
        let config = SimulatorConfig {
            contrast_threshold: c,
            total_rotation: PI / 2.0,
            ..SimulatorConfig::default()
        };
        let trace = simulate_pixel::<ChaCha8Rng>(&px, &config, None).unwrap();
        assert_eq!(trace.crossings.len(), 3);
        assert!(trace.crossings.iter().all(|&(_, p, _)| p == 1));
    }

    #[test]
    fn inter_event_levels_step_by_threshold() {
        let config = SimulatorConfig::default();
        let trace = simulate_pixel::<ChaCha8Rng>(&pixel(1.0, 1.2), &config, None).unwrap();
        assert!(!trace.crossings.is_empty());
        let mut last = trace.initial_level;
        let mut last_t = 0.0;
        for &(t, p, level) in &trace.crossings {
            let dl = level - last;
            assert!((dl.abs() - config.contrast_threshold).abs() < 1e-12);
            assert_eq!(dl.signum() as i8, p);
            assert!(t >= last_t);
            last = level;
            last_t = t;
        }
    }

    #[test]
    fn interpolated_levels_match_true_log_intensity() {
        // at each crossing time the true log intensity is within C/10 of the level
        let config = SimulatorConfig::default();
        let px = pixel(2.1, 1.3);
        let trace = simulate_pixel::<ChaCha8Rng>(&px, &config, None).unwrap();
        for &(t, _, level) in &trace.crossings {
            let phi = t * config.angular_speed;
            let l = polarized_intensity(&px, phi).ln();
            assert!((l - level).abs() <= config.contrast_threshold / 10.0);
        }
    }

    #[test]
    fn non_positive_intensity_is_error() {
        let mut px = pixel(0.0, 0.5);
        px.intensity = 0.0;
        let r = simulate_pixel::<ChaCha8Rng>(&px, &SimulatorConfig::default(), None);
        assert!(matches!(r, Err(Error::Simulation(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SimulatorConfig {
                contrast_threshold: 0.0,
                ..Default::default()
            },
            SimulatorConfig {
                sampling_step: 0.0,
                ..Default::default()
            },
            SimulatorConfig {
                sampling_step: 4.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn stream_is_sorted_and_in_window() {
        let scene = Scene::new(
            16,
            16,
            Geometry::SphereCap {
                cx: 8.0,
                cy: 8.0,
                radius: 8.0,
                max_zenith: 1.4,
            },
            &LightModel::default(),
            1.5,
        )
        .unwrap();
        let out = simulate_events(&scene, &SimulatorConfig::default()).unwrap();
        let ev = out.events.events();
        assert!(!ev.is_empty());
        assert!(ev.windows(2).all(|w| (w[0].t, w[0].y, w[0].x) <= (w[1].t, w[1].y, w[1].x)));
        assert!(ev.iter().all(|e| e.t <= out.events.duration));
    }

    #[test]
    fn jitter_is_seed_deterministic() {
        let scene = Scene::new(
            8,
            8,
            Geometry::Plane {
                azimuth: 0.5,
                zenith: 1.2,
            },
            &LightModel::default(),
            1.5,
        )
        .unwrap();
        let config = SimulatorConfig {
            threshold_jitter: 0.2,
            seed: 7,
            ..Default::default()
        };
        let a = simulate_events(&scene, &config).unwrap();
        let b = simulate_events(&scene, &config).unwrap();
        assert_eq!(a, b);
        let c = simulate_events(&scene, &SimulatorConfig { seed: 8, ..config }).unwrap();
        assert_ne!(a.events, c.events);
    }
}

//! Sectioned `key = value` configuration files.
//!
//! ```text
//! [network]
//! mode = multi
//! base_channels = 16
//!
//! [train]
//! epochs = 200
//! ```

use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::event_model::{Geometry, LightModel, SimulatorConfig};
use crate::spiking_unet::NetworkConfig;
use crate::training::TrainConfig;

pub struct Config {
    ini: Ini,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        Ok(Self { ini })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn empty() -> Self {
        Self { ini: Ini::new() }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.section(Some(section)).and_then(|p| p.get(key))
    }

    pub fn parsed<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}"))),
        }
    }

    /// All `key = value` pairs of a section, in file order.
    pub fn entries(&self, section: &str) -> Vec<(String, String)> {
        self.ini
            .section(Some(section))
            .map(|p| p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
            .unwrap_or_default()
    }

    /// Names of sections starting with `prefix`, with the prefix removed.
    pub fn sections_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.ini
            .sections()
            .flatten()
            .filter_map(|s| s.strip_prefix(prefix).map(str::to_string))
            .collect()
    }

    /// Network settings from `[network]` over the defaults.
    pub fn network(&self) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::default();
        for (k, v) in self.entries("network") {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Training settings from `[train]` over the defaults.
    pub fn train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in self.entries("train") {
            let bad = || Error::Config(format!("[train] {k}: cannot parse {v:?}"));
            match k.as_str() {
                "epochs" => cfg.epochs = v.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad())?,
                "learning_rate" => cfg.learning_rate = v.parse().map_err(|_| bad())?,
                "beta1" => cfg.beta1 = v.parse().map_err(|_| bad())?,
                "beta2" => cfg.beta2 = v.parse().map_err(|_| bad())?,
                "epsilon" => cfg.epsilon = v.parse().map_err(|_| bad())?,
                "grad_clip" => cfg.grad_clip = Some(v.parse().map_err(|_| bad())?),
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "all_pixels" => cfg.all_pixels = v.parse().map_err(|_| bad())?,
                "eval_every" => cfg.eval_every = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown [train] key {k:?}"))),
            }
        }
        Ok(cfg)
    }

    /// Simulator settings from `[simulator]`; angles are given in degrees.
    pub fn simulator(&self) -> Result<SimulatorConfig> {
        let mut cfg = SimulatorConfig::default();
        let s = "simulator";
        if let Some(v) = self.parsed(s, "contrast_threshold")? {
            cfg.contrast_threshold = v;
        }
        if let Some(v) = self.parsed::<f64>(s, "total_rotation_deg")? {
            cfg.total_rotation = v.to_radians();
        }
        if let Some(v) = self.parsed::<f64>(s, "sampling_step_deg")? {
            cfg.sampling_step = v.to_radians();
        }
        if let Some(v) = self.parsed::<f64>(s, "rotation_time_us")? {
            cfg.angular_speed = cfg.total_rotation / v;
        }
        if let Some(v) = self.parsed(s, "threshold_jitter")? {
            cfg.threshold_jitter = v;
        }
        if let Some(v) = self.parsed(s, "seed")? {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn light(&self) -> Result<LightModel> {
        let mut light = LightModel::default();
        if let Some(v) = self.get("light", "direction") {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("[light] direction: cannot parse {v:?}")))?;
            if parts.len() != 3 {
                return Err(Error::Config("[light] direction needs three components".into()));
            }
            light.direction = [parts[0], parts[1], parts[2]];
        }
        if let Some(v) = self.parsed("light", "ambient")? {
            light.ambient = v;
        }
        if let Some(v) = self.parsed("light", "albedo")? {
            light.albedo = v;
        }
        if let Some(v) = self.parsed("light", "background")? {
            light.background = v;
        }
        Ok(light)
    }

    /// Geometry of a `[scene.NAME]` section.
    pub fn geometry(&self, section: &str) -> Result<Geometry> {
        let req = |key: &str| -> Result<f64> {
            self.parsed(section, key)?
                .ok_or_else(|| Error::Config(format!("[{section}] needs {key}")))
        };
        let deg = |key: &str| req(key).map(f64::to_radians);
        let kind = self
            .get(section, "geometry")
            .ok_or_else(|| Error::Config(format!("[{section}] needs geometry")))?;
        Ok(match kind {
            "plane" => Geometry::Plane {
                azimuth: deg("azimuth_deg")?,
                zenith: deg("zenith_deg")?,
            },
            "sphere-cap" => Geometry::SphereCap {
                cx: req("cx")?,
                cy: req("cy")?,
                radius: req("radius")?,
                max_zenith: deg("max_zenith_deg")?,
            },
            "ramp" => Geometry::Ramp {
                azimuth: deg("azimuth_deg")?,
                zenith_start: deg("zenith_start_deg")?,
                zenith_end: deg("zenith_end_deg")?,
            },
            "composite" => Geometry::Composite {
                plane_azimuth: deg("plane_azimuth_deg")?,
                plane_zenith: deg("plane_zenith_deg")?,
                cx: req("cx")?,
                cy: req("cy")?,
                radius: req("radius")?,
                max_zenith: deg("max_zenith_deg")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "[{section}] unknown geometry {other:?} (plane | sphere-cap | ramp | composite)"
                )))
            }
        })
    }
}

//! Event-based shape from polarization with spiking UNets.
//!
//! The crate covers the whole pipeline: a rotating-polarizer event camera
//! simulator over analytic scenes, voxel-grid and CVGR-I encodings, a small
//! reverse-mode tensor engine, IF/LIF/PLIF neurons with an ArcTan surrogate
//! gradient, single- and multi-timestep spiking UNets, training and angular
//! metrics, and synaptic-operation energy accounting.

mod binio;
pub mod cli;
pub mod config;
pub mod encoding;
pub mod energy_profiler;
pub mod error;
pub mod event_model;
pub mod normal_map;
pub mod spiking_neurons;
pub mod spiking_unet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use normal_map::{Image, NormalMap};

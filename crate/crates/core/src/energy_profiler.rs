//! Spiking rates, synaptic-operation counts and 45 nm CMOS energy estimates.
//!
//! Attribution used by [`count_ops`]:
//! * the first layer sees real-valued input, so every synapse is a MAC on every
//!   step: `M * C * T`;
//! * other spiking layers perform one AC per synapse of each firing neuron:
//!   `M * C * F * T`, with `F` the layer's own mean spiking rate;
//! * the potential-assisted output layer is driven by the spikes of the layer
//!   before it and is counted as AC with that layer's rate;
//! * ANN mode counts `M * C` MACs for every layer at one step.
//!
//! `C` is the dense fan-in `in_channels * k^2`; zero-padding at the borders is
//! not subtracted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::spiking_unet::{LayerRole, LayerSpec, SpikingUNet};
use crate::tensor::{Real, Tensor};

pub const MAC_ENERGY_J: f64 = 4.6e-12;
pub const AC_ENERGY_J: f64 = 0.9e-12;

/// Spike statistics of one weighted layer during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// 1-based layer number.
    pub layer: usize,
    pub name: String,
    pub spiking: bool,
    /// Neurons per timestep `K` (summed over the batch).
    pub neurons: u64,
    /// Synaptic connections per neuron.
    pub fan_in: u64,
    pub timesteps: usize,
    /// Spikes per timestep `S_t`; empty for non-spiking layers.
    pub spike_counts: Vec<u64>,
    /// Whether the layer's input tensor was exactly binary.
    pub input_binary: bool,
    /// Whether the layer's output tensor was exactly binary.
    pub output_binary: bool,
    /// Raw spikes, time-major, when requested.
    pub spikes: Option<Tensor<f32>>,
}

/// `F = mean_t S_t / K`.
pub fn mean_spiking_rate(trace: &LayerTrace) -> Result<f64> {
    if trace.neurons == 0 || trace.timesteps == 0 {
        return Err(Error::Config(format!(
            "{}: spiking rate needs K >= 1 and T >= 1",
            trace.name
        )));
    }
    if trace.spike_counts.len() != trace.timesteps {
        return Err(Error::Config(format!(
            "{}: {} spike counts for {} timesteps",
            trace.name,
            trace.spike_counts.len(),
            trace.timesteps
        )));
    }
    let k = trace.neurons as f64;
    Ok(trace.spike_counts.iter().map(|&s| s as f64 / k).sum::<f64>() / trace.timesteps as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOps {
    pub layer: usize,
    pub name: String,
    pub neurons: u64,
    pub fan_in: u64,
    pub timesteps: usize,
    /// Rate used for the AC count (the driving layer's rate for the output layer).
    pub rate: f64,
    pub op_mac: f64,
    pub op_ac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub op_mac: f64,
    pub op_ac: f64,
    pub energy_joules: f64,
    pub layers: Vec<LayerOps>,
    /// Free-form notes on the counting convention.
    pub notes: Vec<String>,
}

impl EnergyReport {
    /// Report from bare operation counts.
    pub fn from_counts(op_mac: f64, op_ac: f64) -> Self {
        Self {
            op_mac,
            op_ac,
            energy_joules: energy_joules(op_mac, op_ac),
            layers: vec![],
            notes: vec![],
        }
    }

    /// `reference energy / own energy`.
    pub fn benefit_over(&self, reference: &EnergyReport) -> f64 {
        reference.energy_joules / self.energy_joules
    }

    pub fn mean_rate(&self) -> f64 {
        let spiking: Vec<_> = self.layers.iter().filter(|l| l.op_ac > 0.0 || l.rate > 0.0).collect();
        if spiking.is_empty() {
            return 0.0;
        }
        spiking.iter().map(|l| l.rate).sum::<f64>() / spiking.len() as f64
    }

    /// Per-layer CSV followed by a `#`-prefixed summary block.
    pub fn to_csv(&self, reference: Option<&EnergyReport>) -> String {
        let mut s = String::from("layer,K,C_syn,T,rate,op_ac\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.0}",
                l.layer, l.neurons, l.fan_in, l.timesteps, l.rate, l.op_ac
            );
        }
        let _ = writeln!(s, "# op_mac,{:.0}", self.op_mac);
        let _ = writeln!(s, "# op_ac,{:.0}", self.op_ac);
        let _ = writeln!(s, "# joules,{:.6e}", self.energy_joules);
        if let Some(r) = reference {
            let _ = writeln!(s, "# benefit,{:.4}", self.benefit_over(r));
        }
        for n in &self.notes {
            let _ = writeln!(s, "# note,{n}");
        }
        s
    }
}

pub fn energy_joules(op_mac: f64, op_ac: f64) -> f64 {
    op_mac * MAC_ENERGY_J + op_ac * AC_ENERGY_J
}

/// Counts operations for `traces` (one per layer of `architecture`).
/// With `ann` set, every layer is a dense MAC layer evaluated once.
pub fn count_ops(traces: &[LayerTrace], architecture: &[LayerSpec], ann: bool) -> Result<EnergyReport> {
    if traces.len() != architecture.len() {
        return Err(Error::IncompleteProfile(format!(
            "{} traces for {} layers",
            traces.len(),
            architecture.len()
        )));
    }
    let mut layers = Vec::with_capacity(traces.len());
    let mut prev_rate = None;
    for (i, (t, spec)) in traces.iter().zip(architecture).enumerate() {
        if t.layer != i + 1 || t.fan_in != spec.fan_in() as u64 {
            return Err(Error::IncompleteProfile(format!(
                "trace {} ({}) does not match layer {} ({})",
                t.layer,
                t.name,
                i + 1,
                spec.name
            )));
        }
        let m = t.neurons as f64;
        let c = t.fan_in as f64;
        let steps = t.timesteps as f64;
        let (rate, op_mac, op_ac) = if ann {
            (1.0, m * c, 0.0)
        } else {
            match spec.role {
                LayerRole::Spiking => {
                    let f = mean_spiking_rate(t)?;
                    prev_rate = Some(f);
                    if i == 0 {
                        (f, m * c * steps, 0.0)
                    } else {
                        (f, 0.0, m * c * f * steps)
                    }
                }
                LayerRole::Output => {
                    let f = prev_rate.ok_or_else(|| {
                        Error::IncompleteProfile("output layer without a driving spiking layer".into())
                    })?;
                    (f, 0.0, m * c * f * steps)
                }
            }
        };
        layers.push(LayerOps {
            layer: t.layer,
            name: t.name.clone(),
            neurons: t.neurons,
            fan_in: t.fan_in,
            timesteps: if ann { 1 } else { t.timesteps },
            rate,
            op_mac,
            op_ac,
        });
    }
    let op_mac = layers.iter().map(|l| l.op_mac).sum();
    let op_ac = layers.iter().map(|l| l.op_ac).sum();
    let notes = vec![
        "C_syn is the dense fan-in in_channels*k^2 without border correction".to_string(),
        if ann {
            "ANN mode: every layer counted as M*C MACs".to_string()
        } else {
            "layer 1 counted as MAC; output layer counted as AC at the rate of its driving layer".to_string()
        },
    ];
    Ok(EnergyReport {
        op_mac,
        op_ac,
        energy_joules: energy_joules(op_mac, op_ac),
        layers,
        notes,
    })
}

/// Runs one inference on a `[1, B, H, W]` input in evaluation mode and counts
/// operations from the recorded spikes.
pub fn profile_inference<T: Real>(
    net: &mut SpikingUNet<T>,
    input: &Tensor<T>,
) -> Result<(Vec<LayerTrace>, EnergyReport)> {
    let was_training = net.is_training();
    net.set_training(false);
    let result = net.predict(input);
    net.set_training(was_training);
    let (_, traces) = result?;
    let report = count_ops(&traces, net.layers(), false)?;
    Ok((traces, report))
}

/// The same network run as a conventional ANN: single-step dimensions, every
/// layer dense MAC.
pub fn ann_reference(architecture: &[LayerSpec], height: usize, width: usize) -> EnergyReport {
    let traces: Vec<LayerTrace> = architecture
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let scale = 1u64 << (2 * l.depth);
            LayerTrace {
                layer: i + 1,
                name: l.name.clone(),
                spiking: false,
                neurons: (l.out_channels * height * width) as u64 / scale,
                fan_in: l.fan_in() as u64,
                timesteps: 1,
                spike_counts: vec![],
                input_binary: false,
                output_binary: false,
                spikes: None,
            }
        })
        .collect();
    count_ops(&traces, architecture, true).expect("traces built from the architecture")
}

//! Single- and multi-timestep spiking UNets.
//!
//! The network has an encoding block of two spiking conv layers, `N_e` encoder
//! blocks (max-pool, two spiking conv layers), `N_d` decoder blocks (upsample,
//! concatenation with the matching encoder output, two spiking conv layers) and
//! a potential-assisted prediction conv. With the default four blocks each way
//! that is 19 weighted layers.
//!
//! Multi-timestep inputs are folded time-major into the batch axis, so each
//! layer runs one convolution for all steps and then unrolls its neurons step by
//! step on the tape.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::write_atomic;
use crate::energy_profiler::LayerTrace;
use crate::error::{Error, Result};
use crate::normal_map::NormalMap;
use crate::spiking_neurons::{
    graph_potential_step, graph_spike_step, plif_logit, NeuronConfig, NeuronKind, TimestepMode,
};
use crate::tensor::{
    kaiming_uniform, read_checkpoint, Checkpoint, Graph, Leak, NamedTensor, NormStats, Real, Tensor,
    UpsampleMode, Var,
};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Temporal bins `B` of the input encoding.
    pub bins: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// `N_c`; depth `d` uses `N_c * 2^d` channels.
    pub base_channels: usize,
    pub kernel: usize,
    pub upsample: UpsampleMode,
    pub neuron: NeuronConfig,
    pub mode: TimestepMode,
    /// Separate normalization statistics per timestep instead of shared ones.
    pub norm_per_timestep: bool,
    pub norm_epsilon: f64,
    pub norm_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            encoder_blocks: 4,
            decoder_blocks: 4,
            base_channels: 16,
            kernel: 3,
            upsample: UpsampleMode::Nearest,
            neuron: NeuronConfig::default(),
            mode: TimestepMode::Multi,
            norm_per_timestep: false,
            norm_epsilon: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.base_channels == 0 || self.encoder_blocks == 0 {
            return Err(Error::Config("bins, base channels and encoder blocks must be positive".into()));
        }
        if self.decoder_blocks != self.encoder_blocks {
            return Err(Error::Config(format!(
                "decoder blocks ({}) must equal encoder blocks ({})",
                self.decoder_blocks, self.encoder_blocks
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if !(self.norm_epsilon > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("invalid normalization epsilon or momentum".into()));
        }
        self.neuron.validate()
    }

    /// Channels at each depth, `N_e + 1` entries.
    pub fn channel_schedule(&self) -> Vec<usize> {
        (0..=self.encoder_blocks).map(|d| self.base_channels << d).collect()
    }

    /// Channels of one network input step.
    pub fn input_channels(&self) -> usize {
        match self.mode {
            TimestepMode::Single => self.bins,
            TimestepMode::Multi => 1,
        }
    }

    pub fn timesteps(&self) -> usize {
        match self.mode {
            TimestepMode::Single => 1,
            TimestepMode::Multi => self.bins,
        }
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("bins", self.bins.to_string());
        kv("encoder_blocks", self.encoder_blocks.to_string());
        kv("decoder_blocks", self.decoder_blocks.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("kernel", self.kernel.to_string());
        kv(
            "upsample",
            match self.upsample {
                UpsampleMode::Nearest => "nearest".into(),
                UpsampleMode::Bilinear => "bilinear".into(),
            },
        );
        kv("neuron", self.neuron.kind.name().into());
        kv("threshold", self.neuron.threshold.to_string());
        kv("reset", self.neuron.reset.to_string());
        kv("leak", self.neuron.leak.to_string());
        kv("mode", self.mode.name().into());
        kv("norm_per_timestep", self.norm_per_timestep.to_string());
        kv("norm_epsilon", self.norm_epsilon.to_string());
        kv("norm_momentum", self.norm_momentum.to_string());
        s
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "bins" => self.bins = num(key, value)?,
            "encoder_blocks" => self.encoder_blocks = num(key, value)?,
            "decoder_blocks" => self.decoder_blocks = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "upsample" => self.upsample = parse_upsample(value)?,
            "neuron" => self.neuron.kind = NeuronKind::parse(value)?,
            "threshold" => self.neuron.threshold = num(key, value)?,
            "reset" => self.neuron.reset = num(key, value)?,
            "leak" => self.neuron.leak = num(key, value)?,
            "mode" => self.mode = TimestepMode::parse(value)?,
            "norm_per_timestep" => self.norm_per_timestep = num(key, value)?,
            "norm_epsilon" => self.norm_epsilon = num(key, value)?,
            "norm_momentum" => self.norm_momentum = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown network key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_upsample(s: &str) -> Result<UpsampleMode> {
    match s.to_ascii_lowercase().as_str() {
        "nearest" => Ok(UpsampleMode::Nearest),
        "bilinear" => Ok(UpsampleMode::Bilinear),
        _ => Err(Error::Config(format!("unknown upsample mode {s:?} (nearest | bilinear)"))),
    }
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerInput {
    /// The encoded events.
    Encoding,
    /// Output of the given layer (0-based).
    Layer(usize),
    /// Max-pooled output of the given layer.
    Pooled(usize),
    /// Upsampled `from` concatenated with the skip output `skip`.
    UpConcat { from: usize, skip: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Spiking,
    /// Potential-assisted output.
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub role: LayerRole,
    pub input: LayerInput,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Resolution level; extent is the input extent divided by `2^depth`.
    pub depth: usize,
}

impl LayerSpec {
    /// Synaptic connections per neuron.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// The layer list for `config`, in execution order.
pub fn architecture(config: &NetworkConfig) -> Vec<LayerSpec> {
    let ch = config.channel_schedule();
    let k = config.kernel;
    let mut layers = Vec::new();
    let mut push = |role, input, cin, cout, depth| {
        let idx = layers.len() + 1;
        layers.push(LayerSpec {
            name: format!("layer{idx:02}"),
            role,
            input,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            depth,
        });
        idx - 1
    };
    let first = push(LayerRole::Spiking, LayerInput::Encoding, config.input_channels(), ch[0], 0);
    let mut last = push(LayerRole::Spiking, LayerInput::Layer(first), ch[0], ch[0], 0);
    let mut skips = vec![last];
    for d in 1..=config.encoder_blocks {
        let a = push(LayerRole::Spiking, LayerInput::Pooled(last), ch[d - 1], ch[d], d);
        last = push(LayerRole::Spiking, LayerInput::Layer(a), ch[d], ch[d], d);
        skips.push(last);
    }
    for d in (0..config.decoder_blocks).rev() {
        let a = push(
            LayerRole::Spiking,
            LayerInput::UpConcat {
                from: last,
                skip: skips[d],
            },
            ch[d + 1] + ch[d],
            ch[d],
            d,
        );
        last = push(LayerRole::Spiking, LayerInput::Layer(a), ch[d], ch[d], d);
    }
    push(LayerRole::Output, LayerInput::Layer(last), ch[0], 3, 0);
    layers
}

/// Trainable tensors and running statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real> {
    pub weight: Tensor<T>,
    /// Output layer only; spiking layers get their offset from the normalization.
    pub bias: Option<Tensor<T>>,
    pub norm_gain: Option<Tensor<T>>,
    pub norm_bias: Option<Tensor<T>>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// PLIF leak logit, one scalar.
    pub leak_logit: Option<Tensor<T>>,
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Keep a copy of every spike tensor in the traces.
    pub dump_spikes: bool,
}

/// Result of a forward pass recorded on a graph.
#[derive(Debug)]
pub struct Forward {
    /// Raw prediction `[batch, 3, H, W]`.
    pub raw: Var,
    /// Parameter handles in [`SpikingUNet::parameters`] order.
    pub params: Vec<Var>,
    /// Per-layer spike statistics, in layer order (the output layer has no spikes).
    pub traces: Vec<LayerTrace>,
    /// Output-layer drive per timestep.
    pub output_drives: Vec<Var>,
    /// Output-layer potential per timestep; the last entry is `raw`.
    pub output_steps: Vec<Var>,
}

pub struct SpikingUNet<T: Real = f32> {
    config: NetworkConfig,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<T>>,
    training: bool,
    force_fire: bool,
}

impl<T: Real> SpikingUNet<T> {
    /// Kaiming-uniform conv weights, zero biases, unit gains.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = architecture(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| {
                let weight = kaiming_uniform(&[l.out_channels, l.in_channels, l.kernel, l.kernel], &mut rng);
                let spiking = l.role == LayerRole::Spiking;
                LayerParams {
                    weight,
                    bias: (!spiking).then(|| Tensor::zeros(&[l.out_channels])),
                    norm_gain: spiking.then(|| Tensor::full(&[l.out_channels], T::one())),
                    norm_bias: spiking.then(|| Tensor::zeros(&[l.out_channels])),
                    running_mean: if spiking { vec![0.0; l.out_channels] } else { vec![] },
                    running_var: if spiking { vec![1.0; l.out_channels] } else { vec![] },
                    leak_logit: (spiking && config.neuron.kind == NeuronKind::Plif)
                        .then(|| Tensor::scalar(T::of(plif_logit(config.neuron.leak)))),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            params,
            training: true,
            force_fire: false,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn layer_params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// averages; evaluation mode uses the running averages.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Test hook: every spiking neuron fires on every step.
    pub fn set_force_fire(&mut self, on: bool) {
        self.force_fire = on;
    }

    /// Number of weighted conv layers.
    pub fn conv_layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Named trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, p) in self.layers.iter().zip(&self.params) {
            out.push((format!("{}.weight", spec.name), &p.weight));
            if let Some(b) = &p.bias {
                out.push((format!("{}.bias", spec.name), b));
            }
            if let Some(g) = &p.norm_gain {
                out.push((format!("{}.norm_gain", spec.name), g));
            }
            if let Some(b) = &p.norm_bias {
                out.push((format!("{}.norm_bias", spec.name), b));
            }
            if let Some(a) = &p.leak_logit {
                out.push((format!("{}.leak_logit", spec.name), a));
            }
        }
        out
    }

    /// Mutable view in [`SpikingUNet::parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for p in &mut self.params {
            out.push(&mut p.weight);
            if let Some(b) = &mut p.bias {
                out.push(b);
            }
            if let Some(g) = &mut p.norm_gain {
                out.push(g);
            }
            if let Some(b) = &mut p.norm_bias {
                out.push(b);
            }
            if let Some(a) = &mut p.leak_logit {
                out.push(a);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.config.bins {
            return Err(Error::Dimension(format!(
                "input has {c} bins, network expects {}",
                self.config.bins
            )));
        }
        let f = 1usize << self.config.encoder_blocks;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "spatial extent {h}x{w} must be a positive multiple of {f}"
            )));
        }
        Ok((n, h, w))
    }

    /// Runs the network on `[batch, B, H, W]` inputs in the configured mode.
    pub fn forward(&mut self, g: &mut Graph<T>, input: &Tensor<T>, opts: ForwardOptions) -> Result<Forward> {
        let (batch, h, w) = self.check_input(input)?;
        let steps = self.config.timesteps();
        let x = match self.config.mode {
            TimestepMode::Single => input.clone(),
            TimestepMode::Multi => fold_time(input),
        };
        let x = g.input(x);

        // parameters in `parameters()` order
        let mut params = Vec::new();
        let mut pv = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let weight = g.param(p.weight.clone());
            params.push(weight);
            let bias = p.bias.as_ref().map(|b| g.param(b.clone()));
            params.extend(bias);
            let gain = p.norm_gain.as_ref().map(|t| g.param(t.clone()));
            params.extend(gain);
            let nb = p.norm_bias.as_ref().map(|t| g.param(t.clone()));
            params.extend(nb);
            let leak = p.leak_logit.as_ref().map(|t| g.param(t.clone()));
            params.extend(leak);
            pv.push((weight, bias, gain, nb, leak));
        }

        let threshold = if self.force_fire {
            f64::NEG_INFINITY
        } else {
            self.config.neuron.threshold
        };
        let neuron = NeuronConfig {
            threshold,
            ..self.config.neuron.clone()
        };
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut output_drives = Vec::new();
        let mut output_steps = Vec::new();
        for (li, spec) in self.layers.iter().enumerate() {
            let layer_in = match spec.input {
                LayerInput::Encoding => x,
                LayerInput::Layer(j) => outputs[j],
                LayerInput::Pooled(j) => g.max_pool2(outputs[j])?,
                LayerInput::UpConcat { from, skip } => {
                    let up = g.upsample2(outputs[from], self.config.upsample)?;
                    g.concat_channels(up, outputs[skip])?
                }
            };
            let input_binary = is_binary(g.value(layer_in).data());
            let (weight, bias, gain, nb, leak) = pv[li];
            let drive = g.conv2d(layer_in, weight, bias)?;
            let (n_all, c_out, lh, lw) = g.value(drive).dims4()?;
            let neurons = (c_out * lh * lw * batch) as u64;
            match spec.role {
                LayerRole::Spiking => {
                    let stats = if self.training {
                        NormStats::Batch {
                            groups: if self.config.norm_per_timestep { steps } else { 1 },
                        }
                    } else {
                        let p = &self.params[li];
                        NormStats::Fixed {
                            mean: p.running_mean.iter().map(|&v| T::of(v)).collect(),
                            var: p.running_var.iter().map(|&v| T::of(v)).collect(),
                        }
                    };
                    let (normed, moments) = g.channel_norm(
                        drive,
                        gain.expect("spiking layer gain"),
                        nb.expect("spiking layer bias"),
                        &stats,
                        self.config.norm_epsilon,
                    )?;
                    if let Some((mean, var)) = moments {
                        let m = self.config.norm_momentum;
                        let p = &mut self.params[li];
                        for c in 0..mean.len() {
                            p.running_mean[c] = (1.0 - m) * p.running_mean[c] + m * mean[c];
                            p.running_var[c] = (1.0 - m) * p.running_var[c] + m * var[c];
                        }
                    }
                    let leak_var = match (neuron.kind, leak) {
                        (NeuronKind::If, _) => Leak::None,
                        (NeuronKind::Lif, _) => Leak::Const(T::of(neuron.leak)),
                        (NeuronKind::Plif, Some(a)) => Leak::Param(g.sigmoid(a)),
                        (NeuronKind::Plif, None) => unreachable!("PLIF layers carry a leak logit"),
                    };
                    let spikes = if steps == 1 {
                        graph_spike_step(g, None, normed, leak_var, &neuron)?.1
                    } else {
                        let mut prev = None;
                        let mut outs = Vec::with_capacity(steps);
                        for t in 0..steps {
                            let d = g.slice_leading(normed, t * batch, batch)?;
                            let (u, o) = graph_spike_step(g, prev, d, leak_var, &neuron)?;
                            prev = Some((u, o));
                            outs.push(o);
                        }
                        g.stack_leading(&outs)?
                    };
                    let values = g.value(spikes).data();
                    let per_step = values.len() / steps;
                    let spike_counts = values
                        .chunks(per_step)
                        .map(|c| c.iter().filter(|&&v| v == T::one()).count() as u64)
                        .collect();
                    traces.push(LayerTrace {
                        layer: li + 1,
                        name: spec.name.clone(),
                        spiking: true,
                        neurons,
                        fan_in: spec.fan_in() as u64,
                        timesteps: steps,
                        spike_counts,
                        input_binary,
                        output_binary: is_binary(values),
                        spikes: opts
                            .dump_spikes
                            .then(|| g.value(spikes).cast::<f32>()),
                    });
                    outputs.push(spikes);
                }
                LayerRole::Output => {
                    debug_assert_eq!(n_all, steps * batch);
                    if steps == 1 {
                        output_drives.push(drive);
                        output_steps.push(drive);
                    } else {
                        let mut prev = None;
                        for t in 0..steps {
                            let d = g.slice_leading(drive, t * batch, batch)?;
                            let u = graph_potential_step(g, prev, d)?;
                            output_drives.push(d);
                            output_steps.push(u);
                            prev = Some(u);
                        }
                    }
                    traces.push(LayerTrace {
                        layer: li + 1,
                        name: spec.name.clone(),
                        spiking: false,
                        neurons,
                        fan_in: spec.fan_in() as u64,
                        timesteps: steps,
                        spike_counts: vec![],
                        input_binary,
                        output_binary: false,
                        spikes: None,
                    });
                    outputs.push(*output_steps.last().expect("at least one step"));
                }
            }
        }
        let raw = *outputs.last().expect("non-empty architecture");
        debug_assert_eq!(g.value(raw).shape(), &[batch, 3, h, w]);
        Ok(Forward {
            raw,
            params,
            traces,
            output_drives,
            output_steps,
        })
    }

    pub fn forward_single(&mut self, g: &mut Graph<T>, input: &Tensor<T>, opts: ForwardOptions) -> Result<Forward> {
        if self.config.mode != TimestepMode::Single {
            return Err(Error::Config("forward_single on a multi-timestep network".into()));
        }
        self.forward(g, input, opts)
    }

    pub fn forward_multi(&mut self, g: &mut Graph<T>, input: &Tensor<T>, opts: ForwardOptions) -> Result<Forward> {
        if self.config.mode != TimestepMode::Multi {
            return Err(Error::Config("forward_multi on a single-timestep network".into()));
        }
        self.forward(g, input, opts)
    }

    /// Raw prediction and traces without keeping the graph around.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<LayerTrace>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input, ForwardOptions::default())?;
        Ok((g.value(f.raw).clone(), f.traces))
    }
}

fn is_binary<T: Real>(v: &[T]) -> bool {
    v.iter().all(|&x| x == T::zero() || x == T::one())
}

/// `[batch, B, H, W]` to time-major `[B * batch, 1, H, W]`.
pub fn fold_time<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (n, b, h, w) = input.dims4().expect("rank-4 input");
    let hw = h * w;
    let src = input.data();
    let mut data = Vec::with_capacity(src.len());
    for t in 0..b {
        for s in 0..n {
            data.extend_from_slice(&src[(s * b + t) * hw..(s * b + t + 1) * hw]);
        }
    }
    Tensor::new(vec![b * n, 1, h, w], data).expect("same count")
}

/// Per-pixel unit normals from a raw `[3, H, W]` prediction (or the first
/// sample of `[N, 3, H, W]`). Pixels with norm below `1e-8` become `(0, 0, 1)`
/// and are flagged `false` in the returned mask.
pub fn normalize_prediction<T: Real>(raw: &Tensor<T>) -> Result<NormalMap> {
    let (h, w) = match raw.shape() {
        [3, h, w] => (*h, *w),
        [_, 3, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("prediction must be [3, H, W], got {s:?}"))),
    };
    let hw = h * w;
    let d = raw.data();
    let mut map = NormalMap::constant(w, h, [0.0; 3]);
    for p in 0..hw {
        let v = [d[p].as_f64(), d[hw + p].as_f64(), d[2 * hw + p].as_f64()];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 1e-8 {
            map.set(p, [0.0, 0.0, 1.0]);
            map.mask[p] = false;
        } else {
            map.set(p, [(v[0] / norm) as f32, (v[1] / norm) as f32, (v[2] / norm) as f32]);
        }
    }
    Ok(map)
}

/// Sidecar path holding the network configuration for a checkpoint.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

impl SpikingUNet<f32> {
    /// Weights plus running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<NamedTensor> = self
            .parameters()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                tensor: t.clone(),
            })
            .collect();
        for (spec, p) in self.layers.iter().zip(&self.params) {
            if spec.role == LayerRole::Spiking {
                let n = p.running_mean.len();
                for (suffix, v) in [("running_mean", &p.running_mean), ("running_var", &p.running_var)] {
                    entries.push(NamedTensor {
                        name: format!("{}.{suffix}", spec.name),
                        tensor: Tensor::new(vec![n], v.iter().map(|&x| x as f32).collect())
                            .expect("matching length"),
                    });
                }
            }
        }
        Checkpoint { entries }
    }

    /// Builds a network for `config` and fills it from `ckpt`. Every expected
    /// tensor must be present with the expected shape.
    pub fn from_checkpoint(config: NetworkConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let expected = ckpt.entries.len();
        let mut used = 0;
        let names: Vec<String> = net.parameters().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(net.parameters_mut()) {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::Schema(format!("checkpoint lacks {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Schema(format!(
                    "{name}: checkpoint shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            used += 1;
        }
        let layers = net.layers.clone();
        for (spec, p) in layers.iter().zip(&mut net.params) {
            if spec.role != LayerRole::Spiking {
                continue;
            }
            for (suffix, dst) in [("running_mean", &mut p.running_mean), ("running_var", &mut p.running_var)] {
                let name = format!("{}.{suffix}", spec.name);
                let t = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::Schema(format!("checkpoint lacks {name}")))?;
                if t.len() != dst.len() {
                    return Err(Error::Schema(format!("{name}: wrong length {}", t.len())));
                }
                *dst = t.data().iter().map(|&v| v as f64).collect();
                used += 1;
            }
        }
        if used != expected {
            return Err(Error::Schema(format!(
                "checkpoint has {expected} tensors, network uses {used}"
            )));
        }
        Ok(net)
    }

    /// Writes the PWTS checkpoint and its `.cfg` sidecar atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(&config_sidecar(path), self.config.to_kv().as_bytes())?;
        write_atomic(path, &self.to_checkpoint().to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_text = std::fs::read_to_string(config_sidecar(path))?;
        let config = NetworkConfig::from_kv(&cfg_text).map_err(|e| Error::Schema(e.to_string()))?;
        let ckpt = read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut net = Self::from_checkpoint(config, &ckpt)?;
        net.set_training(false);
        Ok(net)
    }

    /// Copy in another element type, e.g. for 64-bit gradient checks.
    pub fn cast<U: Real>(&self) -> SpikingUNet<U> {
        SpikingUNet {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: p.weight.cast(),
                    bias: p.bias.as_ref().map(|t| t.cast()),
                    norm_gain: p.norm_gain.as_ref().map(|t| t.cast()),
                    norm_bias: p.norm_bias.as_ref().map(|t| t.cast()),
                    running_mean: p.running_mean.clone(),
                    running_var: p.running_var.clone(),
                    leak_logit: p.leak_logit.as_ref().map(|t| t.cast()),
                })
                .collect(),
            training: self.training,
            force_fire: self.force_fire,
        }
    }
}

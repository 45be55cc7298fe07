//! IF, LIF and PLIF neurons with a Heaviside spike and ArcTan surrogate
//! gradient, plus the non-spiking potential-assisted output neuron.
//!
//! The eager functions here ([`spike_step`], [`potential_step`]) run the
//! dynamics on plain tensors. Networks use [`graph_spike_step`], which records
//! the same update on a [`Graph`] so that gradients flow back through time.

use crate::error::{Error, Result};
use crate::tensor::{arctan_surrogate_grad, Graph, Leak, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronKind {
    If,
    Lif,
    Plif,
}

impl NeuronKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "if" => Ok(Self::If),
            "lif" => Ok(Self::Lif),
            "plif" => Ok(Self::Plif),
            _ => Err(Error::Config(format!("unknown neuron kind {s:?} (if | lif | plif)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::If => "if",
            Self::Lif => "lif",
            Self::Plif => "plif",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    pub threshold: f64,
    pub reset: f64,
    /// Fixed leak for LIF, initial leak for PLIF; ignored by IF.
    pub leak: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            kind: NeuronKind::If,
            threshold: 1.0,
            reset: 0.0,
            leak: 0.5,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > self.reset) {
            return Err(Error::Config(format!(
                "threshold {} must exceed reset {}",
                self.threshold, self.reset
            )));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::Config(format!("leak {} outside (0, 1]", self.leak)));
        }
        if self.kind == NeuronKind::Plif && self.leak >= 1.0 {
            return Err(Error::Config("PLIF initial leak must be below 1".into()));
        }
        Ok(())
    }

    /// Effective leak for the eager API (PLIF uses its current value).
    pub fn leak_factor(&self) -> f64 {
        match self.kind {
            NeuronKind::If => 1.0,
            NeuronKind::Lif | NeuronKind::Plif => self.leak,
        }
    }
}

/// Logit `a` with `sigmoid(a) = leak`.
pub fn plif_logit(leak: f64) -> f64 {
    (leak / (1.0 - leak)).ln()
}

pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Membrane potential and last spikes of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T: Real = f32> {
    pub u: Tensor<T>,
    pub o: Tensor<T>,
}

impl<T: Real> LayerState<T> {
    /// Resting state: `u = reset`, no spikes.
    pub fn fresh(shape: &[usize], reset: T) -> Self {
        Self {
            u: Tensor::full(shape, reset),
            o: Tensor::zeros(shape),
        }
    }
}

/// One timestep: `u = leak * (u_prev (1 - o_prev) + reset o_prev) + drive`,
/// then `o = [u >= threshold]`.
pub fn spike_step<T: Real>(
    state: Option<&LayerState<T>>,
    drive: &Tensor<T>,
    config: &NeuronConfig,
) -> Result<(Tensor<T>, LayerState<T>)> {
    let fresh;
    let prev = match state {
        Some(s) => {
            if s.u.shape() != drive.shape() || s.o.shape() != drive.shape() {
                return Err(Error::Dimension(format!(
                    "state {:?} vs drive {:?}",
                    s.u.shape(),
                    drive.shape()
                )));
            }
            s
        }
        None => {
            fresh = LayerState::fresh(drive.shape(), T::of(config.reset));
            &fresh
        }
    };
    let leak = T::of(config.leak_factor());
    let reset = T::of(config.reset);
    let th = T::of(config.threshold);
    let u: Vec<T> = drive
        .data()
        .iter()
        .zip(prev.u.data().iter().zip(prev.o.data()))
        .map(|(&d, (&u, &o))| leak * (u * (T::one() - o) + reset * o) + d)
        .collect();
    let o: Vec<T> = u.iter().map(|&v| if v >= th { T::one() } else { T::zero() }).collect();
    let shape = drive.shape().to_vec();
    let spikes = Tensor::new(shape.clone(), o)?;
    Ok((
        spikes.clone(),
        LayerState {
            u: Tensor::new(shape, u)?,
            o: spikes,
        },
    ))
}

/// ArcTan surrogate derivative `1 / (1 + (pi x)^2)` elementwise.
pub fn surrogate_grad<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(arctan_surrogate_grad(v.as_f64())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepMode {
    Single,
    Multi,
}

impl TimestepMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            _ => Err(Error::Config(format!("unknown timestep mode {s:?} (single | multi)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Multi => "multi",
        }
    }
}

/// Potential-assisted output neuron. Single mode emits the drive; multi mode
/// integrates without threshold or reset and emits the running potential.
pub fn potential_step<T: Real>(
    state: Option<&Tensor<T>>,
    drive: &Tensor<T>,
    mode: TimestepMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let u = match (mode, state) {
        (TimestepMode::Single, _) | (TimestepMode::Multi, None) => drive.clone(),
        (TimestepMode::Multi, Some(prev)) => {
            if prev.shape() != drive.shape() {
                return Err(Error::Dimension(format!(
                    "potential state {:?} vs drive {:?}",
                    prev.shape(),
                    drive.shape()
                )));
            }
            let data = prev.data().iter().zip(drive.data()).map(|(&a, &b)| a + b).collect();
            Tensor::new(drive.shape().to_vec(), data)?
        }
    };
    Ok((u.clone(), u))
}

/// Graph-recorded [`spike_step`]. Returns `(u, o)` for the next step.
pub fn graph_spike_step<T: Real>(
    g: &mut Graph<T>,
    prev: Option<(Var, Var)>,
    drive: Var,
    leak: Leak<T>,
    config: &NeuronConfig,
) -> Result<(Var, Var)> {
    let u = g.membrane(prev, drive, leak, T::of(config.reset))?;
    let o = g.spike(u, T::of(config.threshold));
    Ok((u, o))
}

/// Graph-recorded [`potential_step`] in multi mode.
pub fn graph_potential_step<T: Real>(g: &mut Graph<T>, prev: Option<Var>, drive: Var) -> Result<Var> {
    match prev {
        Some(u) => g.add(u, drive),
        None => Ok(drive),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_trace_if() {
        let cfg = NeuronConfig::default();
        let (o1, s1) = spike_step(None, &t(&[0.6]), &cfg).unwrap();
        assert_eq!(o1.data(), &[0.0]);
        assert!((s1.u.data()[0] - 0.6).abs() < 1e-15);
        let (o2, s2) = spike_step(Some(&s1), &t(&[0.6]), &cfg).unwrap();
        assert_eq!(o2.data(), &[1.0]);
        assert!((s2.u.data()[0] - 1.2).abs() < 1e-15);
        // the reset applies on the following step
        let (_, s3) = spike_step(Some(&s2), &t(&[0.6]), &cfg).unwrap();
        assert!((s3.u.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn lif_leaks() {
        let cfg = NeuronConfig {
            kind: NeuronKind::Lif,
            leak: 0.5,
            ..Default::default()
        };
        let (_, s1) = spike_step(None, &t(&[0.8]), &cfg).unwrap();
        let (o2, s2) = spike_step(Some(&s1), &t(&[0.5]), &cfg).unwrap();
        assert!((s2.u.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(o2.data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = NeuronConfig::default();
        let s = LayerState::fresh(&[2], 0.0);
        assert!(matches!(spike_step(Some(&s), &t(&[1.0]), &cfg), Err(Error::Dimension(_))));
        assert!(matches!(
            potential_step(Some(&t(&[1.0, 2.0])), &t(&[1.0]), TimestepMode::Multi),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = NeuronConfig {
            threshold: 0.0,
            reset: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NeuronConfig {
            leak: 0.0,
            kind: NeuronKind::Lif,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(NeuronConfig::default().validate().is_ok());
    }

    #[test]
    fn surrogate_values() {
        let g = surrogate_grad(&t(&[0.0, 1.0, -1.0, 10.0, 100.0]));
        assert_eq!(g.data()[0], 1.0);
        assert!((g.data()[1] - g.data()[2]).abs() < 1e-15);
        assert!(g.data()[1] > g.data()[3] && g.data()[3] > g.data()[4]);
        assert!(g.data()[4] < 1e-4);
    }

    #[test]
    fn potential_modes() {
        let d = [t(&[1.0]), t(&[2.0]), t(&[3.0])];
        let mut state = None;
        let mut outs = vec![];
        for x in &d {
            let (o, s) = potential_step(state.as_ref(), x, TimestepMode::Multi).unwrap();
            outs.push(o.data()[0]);
            state = Some(s);
        }
        assert_eq!(outs, vec![1.0, 3.0, 6.0]);
        let (o, _) = potential_step(Some(&t(&[9.0])), &t(&[2.5]), TimestepMode::Single).unwrap();
        assert_eq!(o.data(), &[2.5]);
    }

    #[test]
    fn plif_logit_inverts_sigmoid() {
        assert_eq!(plif_logit(0.5), 0.0);
        assert!((sigmoid(plif_logit(0.3)) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn graph_step_matches_eager() {
        let cfg = NeuronConfig::default();
        let drives = [[0.6, 1.5, -0.2], [0.6, 0.1, 2.0], [0.3, 0.9, 0.0]];
        let mut g = Graph::<f64>::new();
        let mut prev = None;
        let mut state = None;
        for d in drives {
            let dv = g.input(t(&d));
            let (u, o) = graph_spike_step(&mut g, prev, dv, Leak::None, &cfg).unwrap();
            let (spk, s) = spike_step(state.as_ref(), &t(&d), &cfg).unwrap();
            assert_eq!(g.value(o), &spk);
            assert_eq!(g.value(u), &s.u);
            prev = Some((u, o));
            state = Some(s);
        }
    }
}

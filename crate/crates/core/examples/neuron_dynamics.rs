//! Drives IF, LIF and PLIF neurons with the same input and prints membrane
//! potentials and spikes, plus the ArcTan surrogate derivative.
//!
//! cargo run --example neuron_dynamics

use polarspike::spiking_neurons::{potential_step, spike_step, surrogate_grad, NeuronConfig, NeuronKind, TimestepMode};
use polarspike::tensor::Tensor;

fn main() -> polarspike::Result<()> {
    let drive = [0.3, 0.45, 0.2, 0.6, 0.1, 0.55, 0.5, 0.05, 0.7, 0.4];
    for kind in [NeuronKind::If, NeuronKind::Lif, NeuronKind::Plif] {
        let cfg = NeuronConfig {
            kind,
            leak: 0.8,
            ..NeuronConfig::default()
        };
        let mut state = None;
        let mut line = String::new();
        for &d in &drive {
            let (o, s) = spike_step(state.as_ref(), &Tensor::new(vec![1], vec![d])?, &cfg)?;
            line.push_str(&format!("{:5.2}{} ", s.u.data()[0], if o.data()[0] > 0.0 { "*" } else { " " }));
            state = Some(s);
        }
        println!("{:<5}{line}", kind.name());
    }

    // the output neuron integrates without threshold in multi-timestep mode
    let mut u = None;
    let mut line = String::new();
    for &d in &drive {
        let (out, next) = potential_step(u.as_ref(), &Tensor::new(vec![1], vec![d])?, TimestepMode::Multi)?;
        line.push_str(&format!("{:5.2}  ", out.data()[0]));
        u = Some(next);
    }
    println!("out  {line}");

    let x = Tensor::new(vec![7], vec![-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5])?;
    let g = surrogate_grad(&x);
    println!("\nsurrogate derivative around the threshold:");
    for (a, b) in x.data().iter().zip(g.data()) {
        println!("  u - u_th = {a:+.1}  g' = {b:.4}");
    }
    Ok(())
}

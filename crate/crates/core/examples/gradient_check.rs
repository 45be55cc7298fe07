//! Compares reverse-mode gradients of a small conv-IF, conv-IF,
//! potential-output network against central finite differences in f64.
//!
//! cargo run --release --example gradient_check

use polarspike::spiking_neurons::{graph_potential_step, graph_spike_step, NeuronConfig};
use polarspike::tensor::{kaiming_uniform, Graph, Leak, SpikeForward, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 3;

fn loss(weights: &[Tensor<f64>], inputs: &[Tensor<f64>], mode: SpikeForward) -> polarspike::Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::<f64>::with_spike_forward(mode);
    let w: Vec<_> = weights.iter().map(|t| g.param(t.clone())).collect();
    let cfg = NeuronConfig::default();
    let (mut s1, mut s2, mut out) = (None, None, None);
    for x in inputs {
        let x = g.input(x.clone());
        let d1 = g.conv2d(x, w[0], None)?;
        let a = graph_spike_step(&mut g, s1, d1, Leak::None, &cfg)?;
        s1 = Some(a);
        let d2 = g.conv2d(a.1, w[1], None)?;
        let b = graph_spike_step(&mut g, s2, d2, Leak::None, &cfg)?;
        s2 = Some(b);
        let d3 = g.conv2d(b.1, w[2], None)?;
        out = Some(graph_potential_step(&mut g, out, d3)?);
    }
    let sq = g.mul(out.unwrap(), out.unwrap())?;
    let l = g.sum(sq);
    let value = g.value(l).data()[0];
    g.backward(l)?;
    Ok((value, w.iter().map(|&v| g.grad_tensor(v)).collect()))
}

fn main() -> polarspike::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = vec![
        kaiming_uniform::<f64, _>(&[4, 2, 3, 3], &mut rng).map(|v| v * 2.0),
        kaiming_uniform::<f64, _>(&[4, 4, 3, 3], &mut rng).map(|v| v * 2.0),
        kaiming_uniform::<f64, _>(&[3, 4, 3, 3], &mut rng),
    ];
    let inputs: Vec<_> = (0..STEPS).map(|_| Tensor::uniform(&[1, 2, 6, 6], 1.5, &mut rng)).collect();

    // a smooth forward pass makes the whole network differentiable
    let mode = SpikeForward::Surrogate;
    let (_, grads) = loss(&weights, &inputs, mode)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let l = rng.gen_range(0..weights.len());
        let i = rng.gen_range(0..weights[l].len());
        let mut plus = weights.clone();
        plus[l].data_mut()[i] += h;
        let mut minus = weights.clone();
        minus[l].data_mut()[i] -= h;
        let fd = (loss(&plus, &inputs, mode)?.0 - loss(&minus, &inputs, mode)?.0) / (2.0 * h);
        let an = grads[l].data()[i];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        println!("layer {} param {:>3}  reverse {:+.6e}  finite-diff {:+.6e}  rel {:.1e}", l + 1, i, an, fd, rel);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}

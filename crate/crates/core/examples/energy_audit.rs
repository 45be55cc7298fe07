//! Synaptic-operation energy accounting: the reference op counts of a dense
//! ANN and two spiking UNets, then a live profile of a freshly initialized
//! network.
//!
//! cargo run --release --example energy_audit

use polarspike::energy_profiler::{ann_reference, profile_inference, EnergyReport};
use polarspike::spiking_unet::{architecture, NetworkConfig, SpikingUNet};
use polarspike::spiking_neurons::TimestepMode;
use polarspike::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> polarspike::Result<()> {
    let ann = EnergyReport::from_counts(161.11e9, 0.0);
    let single = EnergyReport::from_counts(1.21e9, 22.36e9);
    let multi = EnergyReport::from_counts(1.21e9, 255.35e9);
    println!("{:<14}{:>12}{:>12}{:>12}{:>10}", "model", "MAC", "AC", "mJ", "benefit");
    for (name, r) in [("ANN", &ann), ("single-step", &single), ("multi-step", &multi)] {
        println!(
            "{name:<14}{:>12.3e}{:>12.3e}{:>12.2}{:>9.2}x",
            r.op_mac,
            r.op_ac,
            r.energy_joules * 1e3,
            r.benefit_over(&ann)
        );
    }

    let cfg = NetworkConfig {
        mode: TimestepMode::Multi,
        ..NetworkConfig::default()
    };
    let mut net = SpikingUNet::<f32>::new(cfg.clone(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::uniform(&[1, cfg.bins, 64, 64], 2.0, &mut rng).map(f32::abs);
    let (traces, report) = profile_inference(&mut net, &input)?;
    println!("\nrandom-input profile of an untrained 64x64 network:");
    for (t, l) in traces.iter().zip(&report.layers) {
        println!("  {:<8} K={:<7} C={:<5} T={} rate={:.4}", t.name, t.neurons, t.fan_in, t.timesteps, l.rate);
    }
    let dense = ann_reference(&architecture(&NetworkConfig { mode: TimestepMode::Single, ..cfg }), 64, 64);
    println!(
        "  MAC {:.3e}  AC {:.3e}  {:.3} uJ  (dense {:.3} uJ, {:.2}x)",
        report.op_mac,
        report.op_ac,
        report.energy_joules * 1e6,
        dense.energy_joules * 1e6,
        report.benefit_over(&dense)
    );
    Ok(())
}

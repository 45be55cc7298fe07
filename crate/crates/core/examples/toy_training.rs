//! Simulates a small dataset of random sphere-cap + plane scenes, trains a
//! multi-timestep spiking UNet on it and compares the test error with the
//! best constant normal.
//!
//! cargo run --release --example toy_training -- [epochs]

use polarspike::encoding::encode_stream;
use polarspike::event_model::{simulate_events, Geometry, LightModel, Scene, SimulatorConfig};
use polarspike::spiking_unet::{NetworkConfig, SpikingUNet};
use polarspike::training::{best_constant_normal, evaluate, train, Sample, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> polarspike::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let (w, h, bins) = (32, 32, 8);
    let sim = SimulatorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut samples = Vec::new();
    for i in 0..10 {
        let scene = Scene::new(w, h, Geometry::random_composite(&mut rng, w, h), &LightModel::default(), 1.5)?;
        let out = simulate_events(&scene, &sim)?;
        samples.push(Sample {
            name: format!("scene{i}"),
            input: encode_stream(&out.events, &out.intensity0, bins, sim.contrast_threshold)?,
            normals: out.normals,
        });
    }
    let test = samples.split_off(8);

    let net_cfg = NetworkConfig {
        bins,
        ..NetworkConfig::default()
    };
    let mut net = SpikingUNet::<f32>::new(net_cfg, 0)?;
    println!("{} parameters in {} conv layers", net.parameter_count(), net.conv_layer_count());
    let cfg = TrainConfig {
        epochs,
        learning_rate: 1e-3,
        eval_every: 5,
        ..TrainConfig::default()
    };
    train(&mut net, &samples, &test, &cfg, |epoch, _, row| {
        match &row.eval {
            Some(e) => println!("epoch {epoch:>3}  loss {:.4}  test MAE {:.2} deg", row.loss, e.mae),
            None => println!("epoch {epoch:>3}  loss {:.4}", row.loss),
        }
        Ok(())
    })?;

    let report = evaluate(&mut net, &test, false)?;
    let maps: Vec<_> = test.iter().map(|s| &s.normals).collect();
    let (n, baseline) = best_constant_normal(&maps)?;
    println!("test MAE {:.2} deg, AE<11.25 {:.3}, AE<22.5 {:.3}, AE<30 {:.3}", report.mae, report.ae_11_25, report.ae_22_5, report.ae_30);
    println!("best constant normal [{:.3} {:.3} {:.3}] MAE {:.2} deg", n[0], n[1], n[2], baseline);
    Ok(())
}

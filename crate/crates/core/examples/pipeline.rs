//! The command-line pipeline driven from code: simulate a dataset, train for
//! a couple of epochs, evaluate and profile the checkpoint.
//!
//! cargo run --release --example pipeline -- [work_dir]

use std::path::PathBuf;

use polarspike::cli::{cmd_eval, cmd_profile, cmd_simulate, cmd_train, Overrides};

const CONFIG: &str = "\
[dataset]
width = 32
height = 32

[scene.ball]
geometry = sphere-cap
cx = 16
cy = 16
radius = 13
max_zenith_deg = 70
split = test

[random]
count = 4

[network]
base_channels = 8

[train]
epochs = 2
learning_rate = 1e-3
eval_every = 1
";

fn main() -> polarspike::Result<()> {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("polarspike-pipeline"));
    std::fs::create_dir_all(&work)?;
    let config = work.join("run.ini");
    std::fs::write(&config, CONFIG)?;
    let data = work.join("data");
    let ov = Overrides::default();

    let sim = cmd_simulate(&config, &data, &ov)?;
    for (name, split, n) in &sim.scenes {
        println!("simulated {name} ({split}): {n} events");
    }
    let run = cmd_train(&config, &data, &work.join("train"), &ov)?;
    for row in &run.history {
        println!("epoch {} loss {:.4}", row.epoch, row.loss);
    }
    let report = cmd_eval(&run.checkpoint, &data, &work.join("eval"), Some("test"))?;
    println!("test MAE {:.2} deg", report.mae);
    let profile = cmd_profile(&run.checkpoint, &data, &work.join("profile"), Some("test"))?;
    println!(
        "energy {:.3} uJ per inference, {:.2}x below the dense network",
        profile.report.energy_joules * 1e6,
        profile.report.benefit_over(&profile.ann)
    );
    println!("outputs under {}", work.display());
    Ok(())
}

//! Renders a sphere cap, sweeps the rotating polarizer over it and prints
//! event statistics next to the analytic ground truth.
//!
//! cargo run --release --example simulate_scene

use polarspike::event_model::{
    analytic_cap_mean_zenith, angles_from_normal, simulate_events, Geometry, LightModel, Scene, SimulatorConfig,
};

fn main() -> polarspike::Result<()> {
    let max_zenith = 75f64.to_radians();
    let geometry = Geometry::SphereCap {
        cx: 32.0,
        cy: 32.0,
        radius: 28.0,
        max_zenith,
    };
    let scene = Scene::new(64, 64, geometry, &LightModel::default(), 1.5)?;
    let config = SimulatorConfig::default();
    let out = simulate_events(&scene, &config)?;

    let events = out.events.events();
    let on = events.iter().filter(|e| e.p > 0).count();
    println!("window       {} us", out.events.duration);
    println!("events       {} ({} on, {} off)", events.len(), on, events.len() - on);

    let counts = out.events.counts_per_pixel();
    let busiest = counts.iter().max().copied().unwrap_or(0);
    let active = counts.iter().filter(|&&c| c > 0).count();
    println!("active px    {active} / {}", counts.len());
    println!("max per px   {busiest}");

    let normals = &out.normals;
    let zeniths: Vec<f64> = (0..normals.pixels())
        .filter(|&p| normals.mask[p])
        .map(|p| angles_from_normal(normals.at(p).map(f64::from)).1)
        .collect();
    let mean = zeniths.iter().sum::<f64>() / zeniths.len() as f64;
    println!(
        "mean zenith  {:.3} deg (analytic {:.3} deg)",
        mean.to_degrees(),
        analytic_cap_mean_zenith(max_zenith).to_degrees()
    );

    // event count along the middle row: more events where the surface is steeper
    let row: Vec<String> = (0..64).step_by(4).map(|x| counts[32 * 64 + x].to_string()).collect();
    println!("row 32       {}", row.join(" "));
    Ok(())
}

//! Encodes a simulated event stream into a voxel grid, the cumulative CVGR
//! representation and CVGR-I, and prints per-bin summaries.
//!
//! cargo run --release --example encode_events

use polarspike::encoding::{build_cvgr, build_cvgri, build_voxel_grid};
use polarspike::event_model::{simulate_events, Geometry, LightModel, Scene, SimulatorConfig};

fn main() -> polarspike::Result<()> {
    let geometry = Geometry::Composite {
        plane_azimuth: 0.8,
        plane_zenith: 40f64.to_radians(),
        cx: 32.0,
        cy: 30.0,
        radius: 22.0,
        max_zenith: 70f64.to_radians(),
    };
    let scene = Scene::new(64, 64, geometry, &LightModel::default(), 1.5)?;
    let config = SimulatorConfig::default();
    let out = simulate_events(&scene, &config)?;
    let bins = 8;

    let grid = build_voxel_grid(&out.events, bins)?;
    let cvgr = build_cvgr(&grid, config.contrast_threshold)?;
    let cvgri = build_cvgri(&cvgr, &out.intensity0)?;

    let hw = 64 * 64;
    println!("bin  voxel_sum   cvgr_mean   cvgri_mean");
    for b in 0..bins {
        let v: f32 = grid.values[b * hw..(b + 1) * hw].iter().sum();
        let c: f32 = cvgr.values[b * hw..(b + 1) * hw].iter().sum::<f32>() / hw as f32;
        let i: f32 = cvgri.values[b * hw..(b + 1) * hw].iter().sum::<f32>() / hw as f32;
        println!("{b:>3}  {v:>9.2}  {c:>10.5}  {i:>11.5}");
    }
    let total: f32 = grid.values.iter().sum();
    let last: f32 = cvgr.values[(bins - 1) * hw..].iter().sum();
    println!("C * grid sum = {:.5}, last CVGR bin sum = {:.5}", config.contrast_threshold as f32 * total, last);

    let counts = out.events.counts_per_pixel();
    let busiest = (0..hw).max_by_key(|&p| counts[p]).unwrap_or(0);
    let (x, y) = (busiest % 64, busiest / 64);
    let trace: Vec<String> = (0..bins).map(|b| format!("{:.3}", cvgri.get(b, y, x))).collect();
    println!("CVGR-I at busiest pixel ({x},{y}), {} events: {}", counts[busiest], trace.join(" "));
    Ok(())
}

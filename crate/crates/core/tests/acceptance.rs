//! Acceptance criteria 1-8. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use polarspike::cli::{cmd_simulate, cmd_train, load_dataset, Overrides};
use polarspike::encoding::{build_cvgr, build_voxel_grid};
use polarspike::energy_profiler::EnergyReport;
use polarspike::event_model::{Event, EventStream};
use polarspike::spiking_neurons::{
    graph_potential_step, graph_spike_step, spike_step, LayerState, NeuronConfig, NeuronKind, TimestepMode,
};
use polarspike::spiking_unet::{ForwardOptions, NetworkConfig, SpikingUNet};
use polarspike::tensor::{kaiming_uniform, Graph, Leak, SpikeForward, Tensor, UpsampleMode, Var};
use polarspike::training::{angular_metrics, best_constant_normal, evaluate};
use polarspike::NormalMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn lib<T>(r: polarspike::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 ---------------------------------------------------------------------------

fn encoding_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (w, h, bins, duration) = (24usize, 18usize, 8usize, 50_000u64);
    let t0 = 1_000u64;
    let mut events: Vec<Event> = (0..1000)
        .map(|_| Event {
            x: rng.gen_range(0..w as u16),
            y: rng.gen_range(0..h as u16),
            t: t0 + rng.gen_range(0..=duration),
            p: if rng.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    events.sort_by_key(|e| (e.t, e.y, e.x));
    let stream = lib(EventStream::new(w, h, t0, duration, events.clone()))?;
    let grid = lib(build_voxel_grid(&stream, bins))?;

    // brute force: every event spreads its polarity over the two nearest bins
    let mut oracle = vec![0f64; bins * h * w];
    for e in &events {
        let ts = (bins - 1) as f64 * (e.t - t0) as f64 / duration as f64;
        for b in 0..bins {
            let k = (1.0 - (ts - b as f64).abs()).max(0.0);
            oracle[(b * h + e.y as usize) * w + e.x as usize] += e.p as f64 * k;
        }
    }
    let max_err = grid
        .values
        .iter()
        .zip(&oracle)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    ensure!(max_err <= 1e-6, "voxel grid differs from brute force by {max_err:.3e}");

    let c = 0.07;
    let cvgr = lib(build_cvgr(&grid, c))?;
    let hw = h * w;
    let total: f64 = grid.values.iter().map(|&v| v as f64).sum();
    let last: f64 = cvgr.values[(bins - 1) * hw..].iter().map(|&v| v as f64).sum();
    ensure!(
        (last - c * total).abs() <= 1e-6,
        "last CVGR bin sums to {last}, C x grid sum is {}",
        c * total
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("max |grid - oracle| {max_err:.1e}, {elapsed:.1?}"))
}

// 2 ---------------------------------------------------------------------------

struct Probe {
    loss: f64,
    grads: Vec<Tensor<f64>>,
    spikes: Vec<f64>,
    min_margin: f64,
}

/// conv-IF, conv-IF, potential-output conv unrolled over the input steps,
/// loss = sum of squared final potentials.
fn three_layer(params: &[Tensor<f64>], inputs: &[Tensor<f64>], mode: SpikeForward) -> polarspike::Result<Probe> {
    let mut g = Graph::<f64>::with_spike_forward(mode);
    let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let cfg = NeuronConfig::default();
    let (mut s1, mut s2, mut out) = (None, None, None);
    let mut spike_vars = Vec::new();
    let mut membranes = Vec::new();
    for x in inputs {
        let x = g.input(x.clone());
        let d1 = g.conv2d(x, p[0], None)?;
        let a = graph_spike_step(&mut g, s1, d1, Leak::None, &cfg)?;
        let d2 = g.conv2d(a.1, p[1], None)?;
        let b = graph_spike_step(&mut g, s2, d2, Leak::None, &cfg)?;
        let d3 = g.conv2d(b.1, p[2], Some(p[3]))?;
        out = Some(graph_potential_step(&mut g, out, d3)?);
        spike_vars.extend([a.1, b.1]);
        membranes.extend([a.0, b.0]);
        s1 = Some(a);
        s2 = Some(b);
    }
    let out = out.expect("at least one step");
    let sq = g.mul(out, out)?;
    let loss = g.sum(sq);
    let spikes = spike_vars.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
    let min_margin = membranes
        .iter()
        .flat_map(|&v| g.value(v).data().iter().map(|u| (u - cfg.threshold).abs()))
        .fold(f64::INFINITY, f64::min);
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    Ok(Probe {
        loss: value,
        grads: p.iter().map(|&v| g.grad_tensor(v)).collect(),
        spikes,
        min_margin,
    })
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![
        kaiming_uniform::<f64, _>(&[4, 2, 3, 3], &mut rng).map(|v| 2.0 * v),
        kaiming_uniform::<f64, _>(&[4, 4, 3, 3], &mut rng).map(|v| 2.0 * v),
        kaiming_uniform::<f64, _>(&[3, 4, 3, 3], &mut rng),
        Tensor::uniform(&[3], 0.1, &mut rng),
    ];
    let inputs: Vec<_> = (0..4).map(|_| Tensor::uniform(&[1, 2, 6, 6], 1.5, &mut rng)).collect();
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
    let perturbed = |l: usize, i: usize, d: f64| {
        let mut p = params.clone();
        p[l].data_mut()[i] += d;
        p
    };

    // a) smooth surrogate forward: every parameter of every layer
    let mode = SpikeForward::Surrogate;
    let base = lib(three_layer(&params, &inputs, mode))?;
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut worst_a: f64 = 0.0;
    for _ in 0..100 {
        let mut k = rng.gen_range(0..total);
        let mut l = 0;
        while k >= sizes[l] {
            k -= sizes[l];
            l += 1;
        }
        let fp = lib(three_layer(&perturbed(l, k, h), &inputs, mode))?.loss;
        let fm = lib(three_layer(&perturbed(l, k, -h), &inputs, mode))?.loss;
        let fd = (fp - fm) / (2.0 * h);
        let e = rel(base.grads[l].data()[k], fd);
        ensure!(e <= 1e-3, "surrogate forward: layer {} param {k}: rel err {e:.2e}", l + 1);
        worst_a = worst_a.max(e);
    }

    // b) exact Heaviside forward: output-layer parameters, away from the threshold
    let mode = SpikeForward::Heaviside;
    let base = lib(three_layer(&params, &inputs, mode))?;
    ensure!(base.spikes.iter().any(|&s| s == 1.0), "no spikes in the Heaviside pass");
    let out_sizes = [sizes[2], sizes[3]];
    let (mut worst_b, mut checked, mut excluded) = (0f64, 0, 0);
    for _ in 0..100 {
        let which = rng.gen_range(0..out_sizes[0] + out_sizes[1]);
        let (l, k) = if which < out_sizes[0] { (2, which) } else { (3, which - out_sizes[0]) };
        let plus = lib(three_layer(&perturbed(l, k, h), &inputs, mode))?;
        let minus = lib(three_layer(&perturbed(l, k, -h), &inputs, mode))?;
        if base.min_margin < 1e-3 || plus.spikes != base.spikes || minus.spikes != base.spikes {
            excluded += 1;
            continue;
        }
        let fd = (plus.loss - minus.loss) / (2.0 * h);
        let e = rel(base.grads[l].data()[k], fd);
        ensure!(e <= 1e-3, "Heaviside forward: layer {} param {k}: rel err {e:.2e}", l + 1);
        worst_b = worst_b.max(e);
        checked += 1;
    }
    ensure!(checked > 0, "every Heaviside sample was excluded");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "surrogate 100/100 worst {worst_a:.1e}; Heaviside {checked} checked ({excluded} excluded) worst {worst_b:.1e}; {elapsed:.1?}"
    ))
}

// 3 ---------------------------------------------------------------------------

#[allow(clippy::approx_constant)]
fn energy_arithmetic() -> Outcome {
    let ann = EnergyReport::from_counts(161.11e9, 0.0);
    let single = EnergyReport::from_counts(1.21e9, 22.36e9);
    let multi = EnergyReport::from_counts(1.21e9, 255.35e9);
    let within = |got: f64, want: f64, tol: f64| ((got - want) / want).abs() <= tol;
    for (name, r, mj) in [("ANN", &ann, 741.11), ("single", &single, 25.69), ("multi", &multi, 235.38)] {
        let got = r.energy_joules * 1e3;
        ensure!(within(got, mj, 0.005), "{name}: {got:.3} mJ, expected {mj}");
    }
    let (b1, b2) = (single.benefit_over(&ann), multi.benefit_over(&ann));
    ensure!(within(b1, 28.80, 0.01), "single-step benefit {b1:.3}");
    ensure!(within(b2, 3.14, 0.01), "multi-step benefit {b2:.3}");
    Ok(format!(
        "{:.2} / {:.2} / {:.2} mJ, benefits {b1:.2}x and {b2:.2}x",
        ann.energy_joules * 1e3,
        single.energy_joules * 1e3,
        multi.energy_joules * 1e3
    ))
}

// 4 ---------------------------------------------------------------------------

fn toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("toy.ini");
    std::fs::write(&config, include_str!("../configs/toy.ini")).map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let ov = Overrides::default();
    let sim = lib(cmd_simulate(&config, &data, &ov))?;
    let train_n = sim.scenes.iter().filter(|s| s.1 == "train").count();
    ensure!(
        train_n == 8 && sim.scenes.len() == 10,
        "expected 8 train + 2 test scenes, got {:?}",
        sim.scenes
    );
    let net_cfg = lib(polarspike::config::Config::load(&config).and_then(|c| c.network()))?;
    let train_cfg = lib(polarspike::config::Config::load(&config).and_then(|c| c.train()))?;
    ensure!(
        net_cfg.mode == TimestepMode::Multi
            && net_cfg.base_channels == 16
            && net_cfg.upsample == UpsampleMode::Nearest
            && net_cfg.neuron.kind == NeuronKind::If
            && train_cfg.epochs <= 200
            && train_cfg.batch_size == 2
            && train_cfg.learning_rate == 1e-4,
        "toy config drifted from the prescribed settings"
    );

    let run = lib(cmd_train(&config, &data, &dir.path().join("run"), &ov))?;
    let mut net = lib(SpikingUNet::<f32>::load(&run.checkpoint))?;
    let test = lib(load_dataset(&data, Some("test"), net.config().bins))?;
    let report = lib(evaluate(&mut net, &test, false))?;
    let maps: Vec<&NormalMap> = test.iter().map(|s| &s.normals).collect();
    let (_, baseline) = lib(best_constant_normal(&maps))?;
    let elapsed = start.elapsed();
    let summary = format!(
        "test MAE {:.2} deg, best constant {baseline:.2} deg, {} epochs, {:.1} min",
        report.mae,
        run.history.len(),
        elapsed.as_secs_f64() / 60.0
    );
    ensure!(report.mae < 25.0, "{summary}: MAE not below 25 deg");
    ensure!(report.mae < baseline, "{summary}: not below the constant baseline");
    ensure!(elapsed < Duration::from_secs(30 * 60), "{summary}: over 30 minutes");
    Ok(summary)
}

// 5 ---------------------------------------------------------------------------

fn neuron_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let if_cfg = NeuronConfig::default();
    let lif_one = NeuronConfig {
        kind: NeuronKind::Lif,
        leak: 1.0,
        ..NeuronConfig::default()
    };
    let kinds = [
        if_cfg.clone(),
        NeuronConfig {
            kind: NeuronKind::Lif,
            leak: 0.7,
            ..NeuronConfig::default()
        },
        NeuronConfig {
            kind: NeuronKind::Plif,
            leak: 0.6,
            ..NeuronConfig::default()
        },
    ];
    let mut spikes_seen = 0usize;
    for seq in 0..1000 {
        let len = rng.gen_range(1..40);
        let drives: Vec<Tensor<f64>> = (0..len).map(|_| Tensor::uniform(&[6], 1.2, &mut rng)).collect();
        let run = |cfg: &NeuronConfig| -> polarspike::Result<Vec<(Tensor<f64>, LayerState<f64>)>> {
            let mut state: Option<LayerState<f64>> = None;
            let mut out = Vec::new();
            for d in &drives {
                let (o, s) = spike_step(state.as_ref(), d, cfg)?;
                state = Some(s.clone());
                out.push((o, s));
            }
            Ok(out)
        };
        let a = lib(run(&if_cfg))?;
        let b = lib(run(&lif_one))?;
        for (t, ((oa, _), (ob, _))) in a.iter().zip(&b).enumerate() {
            ensure!(oa == ob, "sequence {seq} step {t}: LIF(1) spikes differ from IF");
        }
        for cfg in &kinds {
            let steps = lib(run(cfg))?;
            let alpha = cfg.leak_factor();
            for t in 0..steps.len() {
                let (o, s) = &steps[t];
                ensure!(
                    o.data().iter().all(|&v| v == 0.0 || v == 1.0),
                    "non-binary spikes from {}",
                    cfg.kind.name()
                );
                spikes_seen += o.data().iter().filter(|&&v| v == 1.0).count();
                for i in 0..6 {
                    let d = drives[t].data()[i];
                    let u = s.u.data()[i];
                    let expected = match t.checked_sub(1).map(|p| &steps[p].1) {
                        // a spike at t-1 removes the prior membrane entirely
                        Some(prev) if prev.o.data()[i] == 1.0 => alpha * cfg.reset + d,
                        Some(prev) => alpha * prev.u.data()[i] + d,
                        None => alpha * cfg.reset + d,
                    };
                    ensure!(u == expected, "{} reset invariant broken at step {t}", cfg.kind.name());
                }
            }
        }
    }

    // every forward pass of the full network emits binary spikes
    let mut passes = 0;
    for kind in [NeuronKind::If, NeuronKind::Lif, NeuronKind::Plif] {
        for mode in [TimestepMode::Single, TimestepMode::Multi] {
            for upsample in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
                let cfg = NetworkConfig {
                    bins: 4,
                    base_channels: 4,
                    encoder_blocks: 2,
                    decoder_blocks: 2,
                    upsample,
                    mode,
                    neuron: NeuronConfig {
                        kind,
                        leak: 0.8,
                        ..NeuronConfig::default()
                    },
                    ..NetworkConfig::default()
                };
                let mut net = lib(SpikingUNet::<f32>::new(cfg, passes))?;
                for training in [true, false] {
                    net.set_training(training);
                    let x = Tensor::uniform(&[2, 4, 16, 16], 2.0, &mut rng);
                    let mut g = Graph::new();
                    let f = lib(net.forward(&mut g, &x, ForwardOptions { dump_spikes: true }))?;
                    for t in f.traces.iter().filter(|t| t.spiking) {
                        let s = t.spikes.as_ref().ok_or("spikes not dumped")?;
                        ensure!(
                            s.data().iter().all(|&v| v == 0.0 || v == 1.0),
                            "{} emitted non-binary spikes",
                            t.name
                        );
                    }
                    passes += 1;
                }
            }
        }
    }
    ensure!(spikes_seen > 0, "the random drives never produced a spike");
    Ok(format!(
        "1000 sequences, {spikes_seen} spikes checked; {passes} network passes binary"
    ))
}

// 6 ---------------------------------------------------------------------------

fn multi_timestep_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = NetworkConfig {
        bins: 5,
        base_channels: 4,
        encoder_blocks: 2,
        decoder_blocks: 2,
        ..NetworkConfig::default()
    };
    let mut net = lib(SpikingUNet::<f32>::new(cfg.clone(), 3))?;
    net.set_training(false);
    let x = Tensor::uniform(&[1, 5, 16, 16], 2.0, &mut rng).map(f32::abs);
    let mut g = Graph::new();
    let f = lib(net.forward(&mut g, &x, ForwardOptions::default()))?;
    ensure!(f.output_drives.len() == 5, "{} recorded drives for 5 steps", f.output_drives.len());
    let mut sum = g.value(f.output_drives[0]).clone();
    for &d in &f.output_drives[1..] {
        for (a, b) in sum.data_mut().iter_mut().zip(g.value(d).data()) {
            *a += b;
        }
    }
    let diff = sum.max_abs_diff(g.value(f.raw));
    ensure!(diff <= 1e-5, "final potential differs from the drive sum by {diff:.2e}");

    // B = 1: multi-timestep and single-timestep networks with the same weights
    let one = NetworkConfig { bins: 1, ..cfg };
    let mut multi = lib(SpikingUNet::<f32>::new(one.clone(), 4))?;
    let mut single = lib(SpikingUNet::<f32>::from_checkpoint(
        NetworkConfig {
            mode: TimestepMode::Single,
            ..one
        },
        &multi.to_checkpoint(),
    ))?;
    let x1 = Tensor::uniform(&[2, 1, 16, 16], 2.0, &mut rng).map(f32::abs);
    let mut worst: f64 = 0.0;
    for training in [true, false] {
        multi.set_training(training);
        single.set_training(training);
        let (a, _) = lib(multi.predict(&x1))?;
        let (b, _) = lib(single.predict(&x1))?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure!(worst <= 1e-6, "B=1 multi vs single differ by {worst:.2e}");
    Ok(format!("drive-sum error {diff:.1e}; B=1 multi vs single {worst:.1e}"))
}

// 7 ---------------------------------------------------------------------------

fn architecture_conformance() -> Outcome {
    let mut net = lib(SpikingUNet::<f32>::new(NetworkConfig::default(), 0))?;
    let n = net.conv_layer_count();
    ensure!(n == 19, "{n} weighted conv layers");
    let names: Vec<_> = net.layers().iter().map(|l| l.name.clone()).collect();
    let expected: Vec<_> = (1..=19).map(|i| format!("layer{i:02}")).collect();
    ensure!(names == expected, "layer names {names:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[1, 8, 32, 32], 2.0, &mut rng).map(f32::abs);
    let (_, traces) = lib(net.predict(&x))?;
    ensure!(traces.len() == 19, "{} traces", traces.len());
    for t in &traces[1..] {
        ensure!(t.input_binary, "{} receives non-binary input under nearest upsampling", t.name);
    }
    for t in &traces[..18] {
        ensure!(t.spiking && t.output_binary, "{} output is not binary spikes", t.name);
    }
    ensure!(!traces[18].spiking, "the output layer should be potential-assisted");
    Ok("19 conv layers; layers 2-19 receive binary spikes; layers 1-18 emit them".into())
}

// 8 ---------------------------------------------------------------------------

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> NormalMap {
    let mut values = vec![0f32; 3 * w * h];
    for p in 0..w * h {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        for c in 0..3 {
            values[c * w * h + p] = (v[c] / n) as f32;
        }
    }
    let mask = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
    NormalMap::new(w, h, values, mask).expect("consistent sizes")
}

fn metric_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let gt = random_map(&mut rng, 12, 10);
        let mut pred = random_map(&mut rng, 12, 10);
        if i % 2 == 0 {
            // half the pairs are close so the threshold fractions are non-trivial
            for p in 0..120 {
                let g = gt.at(p);
                let q = pred.at(p);
                let m = [g[0] + 0.3 * q[0], g[1] + 0.3 * q[1], g[2] + 0.3 * q[2]];
                let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                pred.set(p, m.map(|v| v / n));
            }
        }
        let m = lib(angular_metrics(&pred, &gt, false))?;
        ensure!(
            m.ae_11_25 <= m.ae_22_5 && m.ae_22_5 <= m.ae_30,
            "ordering broken: {} {} {}",
            m.ae_11_25,
            m.ae_22_5,
            m.ae_30
        );
        let mut angles = Vec::new();
        for p in (0..120).filter(|&p| gt.mask[p]) {
            let (a, b) = (pred.at(p), gt.at(p));
            let dot = a[0] as f64 * b[0] as f64 + a[1] as f64 * b[1] as f64 + a[2] as f64 * b[2] as f64;
            let na = (a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
            let nb = (b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
            angles.push((dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees());
        }
        let mae = angles.iter().sum::<f64>() / angles.len() as f64;
        worst = worst.max((mae - m.mae).abs());
        ensure!((mae - m.mae).abs() <= 1e-4, "pair {i}: MAE {} vs oracle {mae}", m.mae);
    }
    Ok(format!("100 pairs, worst MAE deviation {worst:.1e} deg"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("encoding oracle equivalence", encoding_oracle),
        ("gradient verification", gradient_check),
        ("energy arithmetic", energy_arithmetic),
        ("toy end-to-end training", toy_end_to_end),
        ("neuron equivalence", neuron_equivalence),
        ("multi-timestep contract", multi_timestep_contract),
        ("architecture conformance", architecture_conformance),
        ("metric suite", metric_suite),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

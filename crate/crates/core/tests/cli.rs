//! Pipeline commands and the `polarspike` binary.

use std::path::Path;
use std::process::Command;

use polarspike::cli::{cmd_eval, cmd_profile, cmd_simulate, cmd_train, load_dataset, Overrides, RunManifest};
use polarspike::event_model::{analytic_cap_mean_zenith, angles_from_normal};
use polarspike::spiking_unet::SpikingUNet;
use polarspike::training::Sample;
use polarspike::Error;

const SMALL: &str = "\
[dataset]
width = 16
height = 16
seed = 3

[scene.ball]
geometry = sphere-cap
cx = 8
cy = 8
radius = 7
max_zenith_deg = 70
split = test

[scene.tilt]
geometry = plane
azimuth_deg = 30
zenith_deg = 55

[scene.slope]
geometry = ramp
azimuth_deg = 120
zenith_start_deg = 10
zenith_end_deg = 60

[scene.mix]
geometry = composite
plane_azimuth_deg = 200
plane_zenith_deg = 35
cx = 7
cy = 9
radius = 5
max_zenith_deg = 65

[network]
bins = 4
base_channels = 2
encoder_blocks = 2
decoder_blocks = 2

[train]
epochs = 2
learning_rate = 1e-3
eval_every = 1
";

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.ini");
    std::fs::write(&p, text).unwrap();
    p
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_writes_three_files_per_scene_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = cmd_simulate(&cfg, &a, &Overrides::default()).unwrap();
    cmd_simulate(&cfg, &b, &Overrides::default()).unwrap();
    assert_eq!(sa.scenes.len(), 4);
    let names = files(&a);
    let data: Vec<_> = names
        .iter()
        .filter(|n| n.ends_with(".pevt") || n.ends_with(".pnrm") || n.ends_with(".pimg"))
        .collect();
    assert_eq!(data.len(), 12);
    assert!(names.contains(&"manifest.ini".to_string()));
    for n in &names {
        if n == "manifest.ini" {
            continue;
        }
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    let manifest = RunManifest::parse(&std::fs::read_to_string(a.join("manifest.ini")).unwrap()).unwrap();
    assert_eq!(manifest.command, "simulate");
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.outputs.len(), 13);
}

#[test]
fn written_sphere_normals_match_the_analytic_mean_zenith() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[dataset]\nwidth = 256\nheight = 256\n\n[scene.ball]\ngeometry = sphere-cap\ncx = 128\ncy = 128\nradius = 120\nmax_zenith_deg = 70\n",
    );
    let out = dir.path().join("d");
    cmd_simulate(&cfg, &out, &Overrides::default()).unwrap();
    let map = polarspike::event_model::read_normals(&mut std::io::BufReader::new(
        std::fs::File::open(out.join("ball.pnrm")).unwrap(),
    ))
    .unwrap();
    let zen: Vec<f64> = (0..map.pixels())
        .filter(|&p| map.mask[p])
        .map(|p| angles_from_normal(map.at(p).map(f64::from)).1)
        .collect();
    let mean = zen.iter().sum::<f64>() / zen.len() as f64;
    let expected = analytic_cap_mean_zenith(70f64.to_radians());
    assert!((mean - expected).abs() < 1e-3, "{mean} vs {expected}");
}

#[test]
fn train_eval_profile_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    cmd_simulate(&cfg, &data, &Overrides::default()).unwrap();

    let run = cmd_train(&cfg, &data, &dir.path().join("run"), &Overrides::default()).unwrap();
    assert_eq!(run.history.len(), 2);
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(dir.path().join("run/model.cfg").exists());

    let eval_dir = dir.path().join("eval");
    let report = cmd_eval(&run.checkpoint, &data, &eval_dir, None).unwrap();
    assert_eq!(report.per_sample.len(), 4);
    // aggregate row is the pixel-weighted mean of the per-scene rows
    let weighted: f64 = report.per_sample.iter().map(|s| s.mae * s.pixels as f64).sum::<f64>()
        / report.per_sample.iter().map(|s| s.pixels as f64).sum::<f64>();
    assert!((weighted - report.mae).abs() < 1e-9);
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean"));

    let prof = cmd_profile(&run.checkpoint, &data, &dir.path().join("prof"), Some("test")).unwrap();
    assert_eq!(prof.traces.len(), 11);
    assert!(prof.traces.iter().all(|t| t.timesteps == 4));
    let energy = std::fs::read_to_string(dir.path().join("prof/energy.csv")).unwrap();
    assert!(energy.starts_with("layer,K,C_syn,T,rate,op_ac"));
    let rates = std::fs::read_to_string(dir.path().join("prof/rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 12);
}

#[test]
fn zero_epochs_saves_the_initialization_and_overrides_win() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("epochs = 2", "epochs = 0");
    let cfg = write_config(dir.path(), &text);
    let data = dir.path().join("data");
    cmd_simulate(&cfg, &data, &Overrides::default()).unwrap();
    let ov = Overrides {
        seed: Some(17),
        mode: Some("single".into()),
        upsample: Some("bilinear".into()),
        neuron: Some("lif".into()),
    };
    let run = cmd_train(&cfg, &data, &dir.path().join("run"), &ov).unwrap();
    assert!(run.history.is_empty());
    let loaded = SpikingUNet::<f32>::load(&run.checkpoint).unwrap();
    let cfg_used = loaded.config().clone();
    assert_eq!(cfg_used.mode.name(), "single");
    assert_eq!(cfg_used.neuron.kind.name(), "lif");
    let fresh = SpikingUNet::<f32>::new(cfg_used, 17).unwrap();
    assert_eq!(fresh.to_checkpoint(), loaded.to_checkpoint());

    // single-mode profile runs with T = 1 everywhere
    let prof = cmd_profile(&run.checkpoint, &data, &dir.path().join("prof"), None).unwrap();
    assert!(prof.traces.iter().all(|t| t.timesteps == 1));
}

#[test]
fn ground_truth_against_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    cmd_simulate(&cfg, &data, &Overrides::default()).unwrap();
    let samples: Vec<Sample> = load_dataset(&data, None, 4).unwrap();
    for s in &samples {
        let m = polarspike::training::angular_metrics(&s.normals, &s.normals, false).unwrap();
        assert!(m.mae < 0.05, "{}: {}", s.name, m.mae);
        assert_eq!(m.ae_11_25, 1.0);
    }
}

#[test]
fn mismatched_checkpoint_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("epochs = 2", "epochs = 0"));
    let data = dir.path().join("data");
    cmd_simulate(&cfg, &data, &Overrides::default()).unwrap();
    let run = cmd_train(&cfg, &data, &dir.path().join("run"), &Overrides::default()).unwrap();
    let sidecar = dir.path().join("run/model.cfg");
    let text = std::fs::read_to_string(&sidecar).unwrap();
    std::fs::write(&sidecar, text.replace("base_channels = 2", "base_channels = 3")).unwrap();
    let r = cmd_eval(&run.checkpoint, &data, &dir.path().join("eval"), None);
    assert!(matches!(r, Err(Error::Schema(_))), "{r:?}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_polarspike"))
}

#[test]
fn binary_exit_codes() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let usage = bin().arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let missing_flag = bin().args(["train", "--config", "x.ini"]).output().unwrap();
    assert_eq!(missing_flag.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    let ok = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("ball"));

    // bad config value: usage-class error
    let bad = write_config(dir.path(), "[network]\nmode = sideways\n");
    let r = bin()
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));

    // unreadable checkpoint: data error
    let r = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("nope.pwts"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("e"))
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

//! The four pipeline commands behind the `polarspike` binary. Each one reads a
//! config file, writes its outputs into a directory and records a
//! `manifest.ini` next to them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ini::Ini;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::write_atomic;
use crate::config::Config;
use crate::encoding::encode_stream;
use crate::energy_profiler::{ann_reference, count_ops, profile_inference, EnergyReport, LayerTrace};
use crate::error::{Error, Result};
use crate::event_model::{
    read_events, read_image, read_normals, simulate_events, write_events, write_image, write_normals, Geometry,
    Scene,
};
use crate::spiking_neurons::{NeuronKind, TimestepMode};
use crate::spiking_unet::{architecture, parse_upsample, NetworkConfig, SpikingUNet};
use crate::tensor::Tensor;
use crate::training::{evaluate, history_csv, train, EvalReport, HistoryRow, Sample};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub upsample: Option<String>,
    pub neuron: Option<String>,
}

impl Overrides {
    fn apply_network(&self, cfg: &mut NetworkConfig) -> Result<()> {
        if let Some(m) = &self.mode {
            cfg.mode = TimestepMode::parse(m)?;
        }
        if let Some(u) = &self.upsample {
            cfg.upsample = parse_upsample(u)?;
        }
        if let Some(n) = &self.neuron {
            cfg.neuron.kind = NeuronKind::parse(n)?;
        }
        cfg.validate()
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    fn new(command: &str, config: Option<&Path>, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: config.map(Path::to_path_buf),
            seed,
            inputs: vec![],
            outputs: vec![],
            version: env!("CARGO_PKG_VERSION").into(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        let list = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";");
        ini.with_section(Some("run"))
            .set("command", &self.command)
            .set(
                "config",
                self.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            )
            .set("seed", self.seed.to_string())
            .set("inputs", list(&self.inputs))
            .set("outputs", list(&self.outputs))
            .set("version", &self.version)
            .set("timestamp", self.timestamp.to_string());
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let s = ini
            .section(Some("run"))
            .ok_or_else(|| Error::Format("manifest lacks [run]".into()))?;
        let get = |k: &str| s.get(k).unwrap_or_default().to_string();
        let list = |k: &str| {
            get(k)
                .split(';')
                .filter(|p| !p.is_empty())
                .map(PathBuf::from)
                .collect()
        };
        let num = |k: &str| {
            get(k)
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("manifest {k} is not a number")))
        };
        let config = get("config");
        Ok(Self {
            command: get("command"),
            config: (!config.is_empty()).then(|| PathBuf::from(config)),
            seed: num("seed")?,
            inputs: list("inputs"),
            outputs: list("outputs"),
            version: get("version"),
            timestamp: num("timestamp")?,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("manifest.ini"), self.to_ini_string().as_bytes())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<&mut Vec<u8>>) -> Result<()>) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut w = BufWriter::new(&mut bytes);
        f(&mut w)?;
        w.flush()?;
    }
    write_atomic(path, &bytes)
}

/// Scene list of a simulate config: explicit `[scene.NAME]` sections followed
/// by `[random] count` random composite scenes, the last `test_count` of which
/// go to the test split.
fn scene_specs(cfg: &Config, width: usize, height: usize, seed: u64) -> Result<Vec<(String, String, Geometry)>> {
    let mut out = Vec::new();
    for name in cfg.sections_with_prefix("scene.") {
        let section = format!("scene.{name}");
        let split = cfg.get(&section, "split").unwrap_or("train").to_string();
        out.push((name, split, cfg.geometry(&section)?));
    }
    let count: usize = cfg.parsed("random", "count")?.unwrap_or(0);
    let test_count: usize = cfg.parsed("random", "test_count")?.unwrap_or(0);
    if test_count > count {
        return Err(Error::Config("[random] test_count exceeds count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let split = if i >= count - test_count { "test" } else { "train" };
        out.push((format!("random{i:03}"), split.to_string(), Geometry::random_composite(&mut rng, width, height)));
    }
    if out.is_empty() {
        return Err(Error::Config("config defines no scenes".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub scenes: Vec<(String, String, usize)>,
    pub manifest: RunManifest,
}

/// Simulates every configured scene into `out`: `NAME.pevt`, `NAME.pnrm`,
/// `NAME.pimg` per scene plus `dataset.ini` and `manifest.ini`.
pub fn cmd_simulate(config_path: &Path, out: &Path, ov: &Overrides) -> Result<SimulateSummary> {
    let cfg = Config::load(config_path)?;
    let width: usize = cfg.parsed("dataset", "width")?.unwrap_or(64);
    let height: usize = cfg.parsed("dataset", "height")?.unwrap_or(64);
    let refractive_index: f64 = cfg.parsed("dataset", "refractive_index")?.unwrap_or(1.5);
    let seed = ov.seed.or(cfg.parsed("dataset", "seed")?).unwrap_or(0);
    let mut sim = cfg.simulator()?;
    sim.seed = seed;
    let light = cfg.light()?;
    let specs = scene_specs(&cfg, width, height, seed)?;
    create_dir(out)?;

    let mut manifest = RunManifest::new("simulate", Some(config_path), seed);
    let mut dataset = Ini::new();
    dataset
        .with_section(Some("dataset"))
        .set("width", width.to_string())
        .set("height", height.to_string())
        .set("t0_us", "0")
        .set("duration_us", sim.duration_us().to_string())
        .set("contrast_threshold", sim.contrast_threshold.to_string());
    let mut scenes = Vec::new();
    for (name, split, geometry) in specs {
        let kind = geometry.kind();
        let scene = Scene::new(width, height, geometry, &light, refractive_index)?;
        let output = simulate_events(&scene, &sim)?;
        let paths = ["pevt", "pnrm", "pimg"].map(|ext| out.join(format!("{name}.{ext}")));
        write_file(&paths[0], |w| write_events(w, &output.events))?;
        write_file(&paths[1], |w| write_normals(w, &output.normals))?;
        write_file(&paths[2], |w| write_image(w, &output.intensity0))?;
        manifest.outputs.extend(paths);
        dataset
            .with_section(Some(format!("scene.{name}")))
            .set("split", split.as_str())
            .set("geometry", kind)
            .set("events", output.events.len().to_string());
        scenes.push((name, split, output.events.len()));
    }
    let mut buf = Vec::new();
    dataset.write_to(&mut buf)?;
    write_atomic(&out.join("dataset.ini"), &buf)?;
    manifest.inputs.push(config_path.to_path_buf());
    manifest.outputs.push(out.join("dataset.ini"));
    manifest.write(out)?;
    Ok(SimulateSummary { scenes, manifest })
}

/// Loads and encodes the scenes of `split` (all scenes for `None`).
pub fn load_dataset(dir: &Path, split: Option<&str>, bins: usize) -> Result<Vec<Sample>> {
    let cfg = Config::load(&dir.join("dataset.ini")).map_err(|e| Error::Format(e.to_string()))?;
    let t0: u64 = cfg.parsed("dataset", "t0_us")?.unwrap_or(0);
    let duration: u64 = cfg
        .parsed("dataset", "duration_us")?
        .ok_or_else(|| Error::Format("dataset.ini lacks duration_us".into()))?;
    let c: f64 = cfg
        .parsed("dataset", "contrast_threshold")?
        .ok_or_else(|| Error::Format("dataset.ini lacks contrast_threshold".into()))?;
    let open = |name: &str, ext: &str| -> Result<BufReader<File>> {
        let p = dir.join(format!("{name}.{ext}"));
        File::open(&p)
            .map(BufReader::new)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    };
    let mut samples = Vec::new();
    for name in cfg.sections_with_prefix("scene.") {
        let s = cfg.get(&format!("scene.{name}"), "split").unwrap_or("train");
        if split.is_some_and(|want| want != s) {
            continue;
        }
        let events = read_events(&mut open(&name, "pevt")?, Some((t0, duration)))?;
        let normals = read_normals(&mut open(&name, "pnrm")?)?;
        let i0 = read_image(&mut open(&name, "pimg")?)?;
        let input = encode_stream(&events, &i0, bins, c)?;
        samples.push(Sample { name, input, normals });
    }
    Ok(samples)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<HistoryRow>,
    pub checkpoint: PathBuf,
    pub manifest: RunManifest,
}

/// Trains on the `train` split and evaluates on `test`. Writes `model.pwts`
/// (rewritten atomically after each epoch), `model.cfg`, `history.csv` and
/// `manifest.ini`.
pub fn cmd_train(config_path: &Path, data: &Path, out: &Path, ov: &Overrides) -> Result<TrainSummary> {
    let cfg = Config::load(config_path)?;
    let mut net_cfg = cfg.network()?;
    ov.apply_network(&mut net_cfg)?;
    let mut train_cfg = cfg.train()?;
    if let Some(s) = ov.seed {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    let train_set = load_dataset(data, Some("train"), net_cfg.bins)?;
    let test_set = load_dataset(data, Some("test"), net_cfg.bins)?;
    if train_set.is_empty() {
        return Err(Error::Config(format!("{} has no training scenes", data.display())));
    }
    create_dir(out)?;
    let checkpoint = out.join("model.pwts");
    let mut net = SpikingUNet::<f32>::new(net_cfg, train_cfg.seed)?;
    net.save(&checkpoint)?;
    let mut rows: Vec<HistoryRow> = Vec::new();
    let history_path = out.join("history.csv");
    let history = train(&mut net, &train_set, &test_set, &train_cfg, |_, net, row| {
        net.save(&checkpoint)?;
        rows.push(row.clone());
        write_atomic(&history_path, history_csv(&rows).as_bytes())
    })?;
    write_atomic(&history_path, history_csv(&history).as_bytes())?;
    let mut manifest = RunManifest::new("train", Some(config_path), train_cfg.seed);
    manifest.inputs = vec![config_path.to_path_buf(), data.to_path_buf()];
    manifest.outputs = vec![checkpoint.clone(), crate::spiking_unet::config_sidecar(&checkpoint), history_path];
    manifest.write(out)?;
    Ok(TrainSummary {
        history,
        checkpoint,
        manifest,
    })
}

/// Evaluates a checkpoint on one split and writes `eval.csv`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, split: Option<&str>) -> Result<EvalReport> {
    let mut net = SpikingUNet::<f32>::load(checkpoint)?;
    let samples = load_dataset(data, split, net.config().bins)?;
    let report = evaluate(&mut net, &samples, false)?;
    create_dir(out)?;
    write_atomic(&out.join("eval.csv"), report.to_csv().as_bytes())?;
    let mut manifest = RunManifest::new("eval", None, 0);
    manifest.inputs = vec![checkpoint.to_path_buf(), data.to_path_buf()];
    manifest.outputs = vec![out.join("eval.csv")];
    manifest.write(out)?;
    Ok(report)
}

/// Sums spike statistics of the same layers over several inferences.
pub fn merge_traces(runs: &[Vec<LayerTrace>]) -> Result<Vec<LayerTrace>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::IncompleteProfile("no inference runs".into()))?;
    let mut merged = first.clone();
    for run in &runs[1..] {
        if run.len() != merged.len() {
            return Err(Error::IncompleteProfile("runs disagree on layer count".into()));
        }
        for (m, t) in merged.iter_mut().zip(run) {
            m.neurons += t.neurons;
            for (a, b) in m.spike_counts.iter_mut().zip(&t.spike_counts) {
                *a += b;
            }
            m.input_binary &= t.input_binary;
            m.output_binary &= t.output_binary;
            m.spikes = None;
        }
    }
    // rescale to one inference so op counts stay per input
    let n = runs.len() as u64;
    for m in &mut merged {
        m.neurons /= n;
        for s in &mut m.spike_counts {
            *s = (*s as f64 / n as f64).round() as u64;
        }
    }
    Ok(merged)
}

#[derive(Debug, Clone)]
pub struct ProfileSummary {
    pub report: EnergyReport,
    pub ann: EnergyReport,
    pub traces: Vec<LayerTrace>,
}

/// Profiles a checkpoint over every scene of a split. Writes `energy.csv`
/// (per-layer ops and summary) and `rates.csv` (per-layer spiking rates).
pub fn cmd_profile(checkpoint: &Path, data: &Path, out: &Path, split: Option<&str>) -> Result<ProfileSummary> {
    let mut net = SpikingUNet::<f32>::load(checkpoint)?;
    let samples = load_dataset(data, split, net.config().bins)?;
    if samples.is_empty() {
        return Err(Error::Config("no scenes to profile".into()));
    }
    let mut runs = Vec::with_capacity(samples.len());
    let (h, w) = (samples[0].input.height, samples[0].input.width);
    for s in &samples {
        let x = Tensor::new(vec![1, s.input.bins, s.input.height, s.input.width], s.input.values.clone())?;
        runs.push(profile_inference(&mut net, &x)?.0);
    }
    let traces = merge_traces(&runs)?;
    let report = count_ops(&traces, net.layers(), false)?;
    let ann_cfg = NetworkConfig {
        mode: TimestepMode::Single,
        ..net.config().clone()
    };
    let ann = ann_reference(&architecture(&ann_cfg), h, w);
    create_dir(out)?;
    write_atomic(&out.join("energy.csv"), report.to_csv(Some(&ann)).as_bytes())?;
    let mut rates = String::from("layer,spiking_rate,spiking_input\n");
    for (t, l) in traces.iter().zip(&report.layers) {
        rates.push_str(&format!(
            "{},{:.4},{}\n",
            t.layer,
            l.rate,
            if t.input_binary { "yes" } else { "no" }
        ));
    }
    write_atomic(&out.join("rates.csv"), rates.as_bytes())?;
    let mut manifest = RunManifest::new("profile", None, 0);
    manifest.inputs = vec![checkpoint.to_path_buf(), data.to_path_buf()];
    manifest.outputs = vec![out.join("energy.csv"), out.join("rates.csv")];
    manifest.write(out)?;
    Ok(ProfileSummary { report, ann, traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = RunManifest::new("train", Some(Path::new("a.ini")), 7);
        m.inputs = vec!["x".into(), "y".into()];
        m.outputs = vec!["z".into()];
        assert_eq!(RunManifest::parse(&m.to_ini_string()).unwrap(), m);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = NetworkConfig::default();
        let ov = Overrides {
            mode: Some("single".into()),
            neuron: Some("plif".into()),
            upsample: Some("bilinear".into()),
            seed: None,
        };
        ov.apply_network(&mut cfg).unwrap();
        assert_eq!(cfg.mode, TimestepMode::Single);
        assert_eq!(cfg.neuron.kind, NeuronKind::Plif);
        let bad = Overrides {
            mode: Some("triple".into()),
            ..Default::default()
        };
        assert!(matches!(bad.apply_network(&mut cfg), Err(Error::Config(_))));
    }
}

//! Cosine loss, angular metrics, Adam and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::CvgriTensor;
use crate::error::{Error, Result};
use crate::normal_map::NormalMap;
use crate::spiking_unet::{normalize_prediction, ForwardOptions, SpikingUNet};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Average the loss over every pixel instead of the valid ones.
    pub all_pixels: bool,
    /// Evaluate every this many epochs (and always after the last one); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: None,
            seed: 0,
            all_pixels: false,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    /// A learning rate of exactly zero is accepted so that a run can be used as
    /// a no-op reference.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam moment coefficients".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

fn pixel_weights(gt: &NormalMap, all_pixels: bool) -> Vec<bool> {
    if all_pixels {
        vec![true; gt.pixels()]
    } else {
        gt.mask.clone()
    }
}

/// Mean of `1 - <pred, gt>` over valid pixels of `gt` (or all pixels).
pub fn cosine_loss(pred: &NormalMap, gt: &NormalMap, all_pixels: bool) -> Result<f64> {
    check_maps(pred, gt)?;
    let mask = pixel_weights(gt, all_pixels);
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in (0..gt.pixels()).filter(|&p| mask[p]) {
        let (a, b) = (pred.at(p), gt.at(p));
        sum += 1.0 - dot(a, b);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f64 {
    a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_maps(pred: &NormalMap, gt: &NormalMap) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Angular error summary of one map (or an aggregate).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub name: String,
    /// Degrees.
    pub mae: f64,
    pub ae_11_25: f64,
    pub ae_22_5: f64,
    pub ae_30: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Pixel-weighted aggregate over all samples.
    pub mae: f64,
    pub ae_11_25: f64,
    pub ae_22_5: f64,
    pub ae_30: f64,
    pub pixels: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    /// Pools per-sample rows, weighting each by its pixel count.
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        let pixels: usize = per_sample.iter().map(|s| s.pixels).sum();
        if pixels == 0 {
            return Err(Error::EmptyMask);
        }
        let avg = |f: fn(&SampleMetrics) -> f64| {
            per_sample.iter().map(|s| f(s) * s.pixels as f64).sum::<f64>() / pixels as f64
        };
        Ok(Self {
            mae: avg(|s| s.mae),
            ae_11_25: avg(|s| s.ae_11_25),
            ae_22_5: avg(|s| s.ae_22_5),
            ae_30: avg(|s| s.ae_30),
            pixels,
            per_sample,
        })
    }

    /// `sample,pixels,mae,ae11.25,ae22.5,ae30` with a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,pixels,mae,ae11.25,ae22.5,ae30\n");
        let mut row = |name: &str, px: usize, m: f64, a: f64, b: f64, c: f64| {
            let _ = writeln!(s, "{name},{px},{m:.6},{a:.6},{b:.6},{c:.6}");
        };
        for r in &self.per_sample {
            row(&r.name, r.pixels, r.mae, r.ae_11_25, r.ae_22_5, r.ae_30);
        }
        row("mean", self.pixels, self.mae, self.ae_11_25, self.ae_22_5, self.ae_30);
        s
    }
}

/// Per-pixel angle `acos(clamp(<pred, gt>, -1, 1))` in degrees, summarized.
pub fn angular_metrics(pred: &NormalMap, gt: &NormalMap, all_pixels: bool) -> Result<SampleMetrics> {
    check_maps(pred, gt)?;
    let mask = pixel_weights(gt, all_pixels);
    let (mut sum, mut n) = (0.0, 0usize);
    let mut below = [0usize; 3];
    for p in (0..gt.pixels()).filter(|&p| mask[p]) {
        let e = dot(pred.at(p), gt.at(p)).clamp(-1.0, 1.0).acos().to_degrees();
        sum += e;
        n += 1;
        for (k, tau) in [11.25, 22.5, 30.0].into_iter().enumerate() {
            if e < tau {
                below[k] += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(SampleMetrics {
        name: String::new(),
        mae: sum / nf,
        ae_11_25: below[0] as f64 / nf,
        ae_22_5: below[1] as f64 / nf,
        ae_30: below[2] as f64 / nf,
        pixels: n,
    })
}

/// First and second moments, kept in 64-bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "parameter {i}: shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} (shape {:?}) element {j} is {:?}",
                g.shape(),
                g.data()[j]
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let scale = match config.grad_clip {
        Some(clip) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gr = gv.as_f64() * scale;
            m[j] = b1 * m[j] + (1.0 - b1) * gr;
            v[j] = b2 * v[j] + (1.0 - b2) * gr * gr;
            let update = config.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + config.epsilon);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}

/// One encoded capture with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub input: CvgriTensor,
    pub normals: NormalMap,
}

/// Stacks samples into `[N, B, H, W]` inputs and `[N, 3, H, W]` targets.
fn batch_tensors<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (b, h, w) = (first.input.bins, first.input.height, first.input.width);
    let mut x = Vec::with_capacity(samples.len() * b * h * w);
    let mut y = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.input.bins, s.input.height, s.input.width) != (b, h, w)
            || (s.normals.width, s.normals.height) != (w, h)
        {
            return Err(Error::Dimension(format!("sample {} differs in shape from the batch", s.name)));
        }
        x.extend(s.input.values.iter().map(|&v| T::of(v as f64)));
        y.extend(s.normals.values.iter().map(|&v| T::of(v as f64)));
    }
    Ok((
        Tensor::new(vec![samples.len(), b, h, w], x)?,
        Tensor::new(vec![samples.len(), 3, h, w], y)?,
    ))
}

/// Loss value and parameter gradients for one batch.
pub fn batch_gradients<T: Real>(
    net: &mut SpikingUNet<T>,
    batch: &[&Sample],
    all_pixels: bool,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (x, y) = batch_tensors::<T>(batch)?;
    let mut weights = Vec::with_capacity(batch.len() * y.shape()[2] * y.shape()[3]);
    for s in batch {
        weights.extend(pixel_weights(&s.normals, all_pixels));
    }
    let count = weights.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let wv: Vec<T> = weights
        .iter()
        .map(|&m| if m { T::of(1.0 / count as f64) } else { T::zero() })
        .collect();
    let mut g = Graph::new();
    g.set_retain_grads(false);
    let f = net.forward(&mut g, &x, ForwardOptions::default())?;
    let pred = g.normalize_pixels(f.raw)?;
    let loss = g.weighted_cosine(pred, &y, wv)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    g.backward(loss)?;
    Ok((value, f.params.iter().map(|&p| g.grad_tensor(p)).collect()))
}

/// Evaluates `net` in evaluation mode on every sample.
pub fn evaluate<T: Real>(net: &mut SpikingUNet<T>, samples: &[Sample], all_pixels: bool) -> Result<EvalReport> {
    let was_training = net.is_training();
    net.set_training(false);
    let mut rows = Vec::with_capacity(samples.len());
    let mut result = Ok(());
    for s in samples {
        let r = batch_tensors::<T>(&[s])
            .and_then(|(x, _)| net.predict(&x))
            .and_then(|(raw, _)| normalize_prediction(&raw))
            .and_then(|pred| angular_metrics(&pred, &s.normals, all_pixels));
        match r {
            Ok(mut m) => {
                m.name = s.name.clone();
                rows.push(m);
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    net.set_training(was_training);
    result?;
    EvalReport::from_samples(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub eval: Option<EvalReport>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,loss,mae,ae11.25,ae22.5,ae30\n");
    for r in rows {
        match &r.eval {
            Some(e) => {
                let _ = writeln!(
                    s,
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    r.epoch, r.loss, e.mae, e.ae_11_25, e.ae_22_5, e.ae_30
                );
            }
            None => {
                let _ = writeln!(s, "{},{:.6},,,,", r.epoch, r.loss);
            }
        }
    }
    s
}

/// Trains `net` on `train_set` with per-epoch shuffling from `config.seed`,
/// evaluating on `eval_set` periodically. `on_epoch` runs after every epoch
/// (e.g. to checkpoint). On a non-finite loss or gradient the parameters of the
/// last completed epoch are restored and [`Error::Diverged`] is returned.
pub fn train<T: Real>(
    net: &mut SpikingUNet<T>,
    train_set: &[Sample],
    eval_set: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &SpikingUNet<T>, &HistoryRow) -> Result<()>,
) -> Result<Vec<HistoryRow>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let snapshot = net.layer_params().to_vec();
        net.set_training(true);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = batch_gradients(net, &batch, config.all_pixels).and_then(|(loss, grads)| {
                let mut params = net.parameters_mut();
                adam_step(&mut params, &grads, &mut adam, config)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(e @ Error::NonFinite(_)) => {
                    net.layer_params_mut().clone_from_slice(&snapshot);
                    return Err(Error::Diverged {
                        epoch,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let loss = total / batches as f64;
        let due = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let eval = if due && !eval_set.is_empty() {
            Some(evaluate(net, eval_set, config.all_pixels)?)
        } else {
            None
        };
        let row = HistoryRow { epoch, loss, eval };
        on_epoch(epoch, net, &row)?;
        history.push(row);
    }
    net.set_training(false);
    Ok(history)
}

/// The single unit normal with the lowest mean angular error against every
/// valid pixel of `maps`, and that error.
pub fn best_constant_normal(maps: &[&NormalMap]) -> Result<([f64; 3], f64)> {
    let mut normals = Vec::new();
    for m in maps {
        for p in (0..m.pixels()).filter(|&p| m.mask[p]) {
            let n = m.at(p).map(|v| v as f64);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            normals.push(n.map(|v| v / len));
        }
    }
    if normals.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mae = |c: [f64; 3]| {
        normals
            .iter()
            .map(|n| (n[0] * c[0] + n[1] * c[1] + n[2] * c[2]).clamp(-1.0, 1.0).acos())
            .sum::<f64>()
            .to_degrees()
            / normals.len() as f64
    };
    let from_angles = |az: f64, zen: f64| [zen.sin() * az.cos(), zen.sin() * az.sin(), zen.cos()];
    // coarse sweep over the sphere, then pattern search around the best point
    let (mut best_az, mut best_zen, mut best) = (0.0, 0.0, f64::INFINITY);
    for i in 0..=36 {
        for j in 0..72 {
            let (az, zen) = ((j as f64 * 5.0).to_radians(), (i as f64 * 5.0).to_radians());
            let e = mae(from_angles(az, zen));
            if e < best {
                (best_az, best_zen, best) = (az, zen, e);
            }
        }
    }
    let mut step = 5f64.to_radians();
    while step > 1e-7 {
        let mut improved = false;
        for (da, dz) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let e = mae(from_angles(best_az + da, best_zen + dz));
            if e < best {
                best_az += da;
                best_zen += dz;
                best = e;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((from_angles(best_az, best_zen), best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(n: [f32; 3]) -> NormalMap {
        NormalMap::constant(2, 2, n)
    }

    #[test]
    fn loss_examples() {
        let gt = map([0.0, 0.0, 1.0]);
        assert_eq!(cosine_loss(&gt, &gt, false).unwrap(), 0.0);
        assert_eq!(cosine_loss(&map([0.0, 0.0, -1.0]), &gt, false).unwrap(), 2.0);
        assert_eq!(cosine_loss(&map([1.0, 0.0, 0.0]), &gt, false).unwrap(), 1.0);
        let mut empty = gt.clone();
        empty.mask = vec![false; 4];
        assert!(matches!(cosine_loss(&gt, &empty, false), Err(Error::EmptyMask)));
        assert_eq!(cosine_loss(&map([1.0, 0.0, 0.0]), &empty, true).unwrap(), 1.0);
    }

    #[test]
    fn metric_examples() {
        let gt = map([0.0, 1.0, 0.0]);
        let same = angular_metrics(&gt, &gt, false).unwrap();
        assert_eq!((same.mae, same.ae_11_25, same.ae_30), (0.0, 1.0, 1.0));
        let perp = angular_metrics(&map([0.0, 0.0, 1.0]), &gt, false).unwrap();
        assert!((perp.mae - 90.0).abs() < 1e-9);
        assert_eq!((perp.ae_11_25, perp.ae_22_5, perp.ae_30), (0.0, 0.0, 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::default();
        for _ in 0..10 {
            adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let r = adam_step(&mut [&mut p], &[g], &mut AdamState::default(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn clip_bounds_the_first_step() {
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let g = Tensor::new(vec![2], vec![300.0, 400.0]).unwrap();
        let cfg = TrainConfig {
            grad_clip: Some(1.0),
            ..Default::default()
        };
        adam_step(&mut [&mut p], &[g], &mut AdamState::default(), &cfg).unwrap();
        // the first Adam step has magnitude lr per coordinate regardless of scale
        assert!((p.data()[0] + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn best_constant_of_a_constant_map() {
        let m = map([0.6, 0.0, 0.8]);
        let (c, e) = best_constant_normal(&[&m]).unwrap();
        assert!(e < 1e-4, "{e}");
        assert!((c[0] - 0.6).abs() < 1e-5 && (c[2] - 0.8).abs() < 1e-5, "{c:?}");
    }

    #[test]
    fn csv_has_mean_row() {
        let rows = vec![
            SampleMetrics {
                name: "a".into(),
                mae: 10.0,
                ae_11_25: 1.0,
                ae_22_5: 1.0,
                ae_30: 1.0,
                pixels: 1,
            },
            SampleMetrics {
                name: "b".into(),
                mae: 20.0,
                ae_11_25: 0.0,
                ae_22_5: 1.0,
                ae_30: 1.0,
                pixels: 1,
            },
        ];
        let r = EvalReport::from_samples(rows).unwrap();
        assert_eq!(r.mae, 15.0);
        assert!(r.to_csv().ends_with("mean,2,15.000000,0.500000,1.000000,1.000000\n"));
    }
}

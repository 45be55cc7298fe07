use std::f64::consts::PI;

use super::kernels::{self, Dims4};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// What the spike operator emits in the forward pass. The backward pass always
/// uses the ArcTan surrogate derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeForward {
    /// Exact Heaviside step, the production behaviour.
    #[default]
    Heaviside,
    /// The smooth surrogate `g(x) = atan(pi x) / pi + 1/2` itself. Only useful for
    /// finite-difference checks, where the forward has to be differentiable.
    Surrogate,
}

/// Decay applied to the carried-over membrane potential.
#[derive(Debug, Clone, Copy)]
pub enum Leak<T> {
    /// IF neuron.
    None,
    /// LIF neuron with a fixed factor.
    Const(T),
    /// PLIF neuron; the variable must be a single-element tensor.
    Param(Var),
}

/// Statistics used by [`Graph::channel_norm`].
#[derive(Debug, Clone)]
pub enum NormStats<T> {
    /// Standardize with the current batch. `groups` contiguous blocks of the
    /// leading axis get their own statistics.
    Batch { groups: usize },
    /// Standardize with externally supplied per-channel statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        k: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
        mode: UpsampleMode,
    },
    Concat {
        a: Var,
        b: Var,
    },
    ChannelNorm {
        input: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        batch_stats: bool,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceLeading {
        input: Var,
        start: usize,
    },
    StackLeading(Vec<Var>),
    Membrane {
        prev: Option<(Var, Var)>,
        drive: Var,
        leak: Leak<T>,
        reset: T,
    },
    Spike {
        input: Var,
        threshold: T,
    },
    NormalizePixels {
        input: Var,
        inv_norm: Vec<T>,
    },
    WeightedCosine {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, which is already a
/// topological order, so the backward sweep walks the node list in reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    state: TapeState,
    spike_forward: SpikeForward,
    retain_grads: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// ArcTan surrogate `g(x) = atan(pi x) / pi + 1/2`.
pub fn arctan_surrogate(x: f64) -> f64 {
    (PI * x).atan() / PI + 0.5
}

/// Derivative of [`arctan_surrogate`]: `1 / (1 + (pi x)^2)`.
pub fn arctan_surrogate_grad(x: f64) -> f64 {
    let px = PI * x;
    1.0 / (1.0 + px * px)
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            state: TapeState::Recording,
            spike_forward: SpikeForward::Heaviside,
            retain_grads: true,
        }
    }

    pub fn with_spike_forward(mode: SpikeForward) -> Self {
        Self {
            spike_forward: mode,
            ..Self::new()
        }
    }

    /// When disabled, gradients of non-leaf nodes are dropped as soon as they
    /// have been propagated, which roughly halves peak memory during training.
    pub fn set_retain_grads(&mut self, retain: bool) {
        self.retain_grads = retain;
    }

    pub fn spike_forward(&self) -> SpikeForward {
        self.spike_forward
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zero if nothing flowed into the node.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    /// Same-padded stride-1 cross-correlation of `[N, C_in, H, W]` with
    /// `[C_out, C_in, k, k]`, plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (c_out, c_in, k, k2) = self.value(weight).dims4()?;
        if c_in != c || k != k2 || k % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?} incompatible with kernel {:?} (odd square kernels only)",
                self.value(input).shape(),
                self.value(weight).shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::Dimension(format!(
                    "conv2d: bias has {} entries for {} output channels",
                    self.value(b).len(),
                    c_out
                )));
            }
        }
        let dims = Dims4::new(n, c, h, w);
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            dims,
            self.value(weight).data(),
            c_out,
            k,
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![n, c_out, h, w], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
            },
            rg,
        ))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "max_pool2 needs even extents, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(input).data(), Dims4::new(n, c, h, w));
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2(&mut self, input: Var, mode: UpsampleMode) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let dims = Dims4::new(n, c, h, w);
        let out = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest_forward(self.value(input).data(), dims),
            UpsampleMode::Bilinear => kernels::upsample_bilinear_forward(self.value(input).data(), dims),
        };
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Upsample { input, mode }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = kernels::concat_channels(self.value(a).data(), ca, self.value(b).data(), cb, na, ha * wa);
        let t = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Per-channel standardization followed by an affine `gain * xhat + bias`.
    /// In batch mode the returned moments are `(mean, unbiased variance)` per
    /// channel averaged over groups, for running-average bookkeeping.
    #[allow(clippy::type_complexity)]
    pub fn channel_norm(
        &mut self,
        input: Var,
        gain: Var,
        bias: Var,
        stats: &NormStats<T>,
        epsilon: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "channel_norm: affine parameters must have {c} entries"
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::Config("channel_norm epsilon must be positive".into()));
        }
        let dims = Dims4::new(n, c, h, w);
        let (groups, mean, var, batch_stats) = match stats {
            NormStats::Batch { groups } => {
                if *groups == 0 || n % groups != 0 {
                    return Err(Error::Dimension(format!(
                        "channel_norm: {n} samples cannot form {groups} groups"
                    )));
                }
                let (m, v) = kernels::channel_moments(self.value(input).data(), dims, *groups);
                (*groups, m, v, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "channel_norm: fixed statistics must have {c} entries"
                    )));
                }
                (
                    1,
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    false,
                )
            }
        };
        let per_group = n / groups;
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + epsilon).sqrt())).collect();
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            let grp = s / per_group;
            for ch in 0..c {
                let idx = grp * c + ch;
                let mu = T::of(mean[idx]);
                let is = inv_std[idx];
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let moments = batch_stats.then(|| {
            let m = (per_group * hw) as f64;
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mut cm = vec![0.0; c];
            let mut cv = vec![0.0; c];
            for grp in 0..groups {
                for ch in 0..c {
                    cm[ch] += mean[grp * c + ch] / groups as f64;
                    cv[ch] += var[grp * c + ch] * correction / groups as f64;
                }
            }
            (cm, cv)
        });
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(gain) || self.rg(bias);
        let v = self.push(
            t,
            Op::ChannelNorm {
                input,
                gain,
                bias,
                groups,
                batch_stats,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, moments))
    }

    /// Samples `[start, start + len)` of the leading axis.
    pub fn slice_leading(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input).slice_leading(start, len)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::SliceLeading { input, start }, rg))
    }

    /// Concatenates along the leading axis.
    pub fn stack_leading(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("stack_leading of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "stack_leading: {:?} vs trailing {:?}",
                    v.shape(),
                    tail
                )));
            }
            n += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::StackLeading(parts.to_vec()), rg))
    }

    /// Membrane update with multiplicative hard reset:
    /// `u = leak * (u_prev * (1 - o_prev) + reset * o_prev) + drive`.
    /// Without a previous state the neuron starts at `reset` with no spike.
    pub fn membrane(&mut self, prev: Option<(Var, Var)>, drive: Var, leak: Leak<T>, reset: T) -> Result<Var> {
        let leak_value = match leak {
            Leak::None => T::one(),
            Leak::Const(a) => a,
            Leak::Param(p) => {
                if self.value(p).len() != 1 {
                    return Err(Error::Dimension("leak parameter must be a scalar".into()));
                }
                self.value(p).data()[0]
            }
        };
        let d = self.value(drive);
        let out: Vec<T> = match prev {
            Some((u, o)) => {
                same_shape(self.value(u), d, "membrane")?;
                same_shape(self.value(o), d, "membrane")?;
                let (u, o) = (self.value(u).data(), self.value(o).data());
                d.data()
                    .iter()
                    .zip(u.iter().zip(o))
                    .map(|(&dv, (&uv, &ov))| leak_value * (uv * (T::one() - ov) + reset * ov) + dv)
                    .collect()
            }
            None => d.data().iter().map(|&dv| leak_value * reset + dv).collect(),
        };
        let t = Tensor::new(d.shape().to_vec(), out)?;
        let mut rg = self.rg(drive);
        if let Some((u, o)) = prev {
            rg |= self.rg(u) || self.rg(o);
        }
        if let Leak::Param(p) = leak {
            rg |= self.rg(p);
        }
        Ok(self.push(
            t,
            Op::Membrane {
                prev,
                drive,
                leak,
                reset,
            },
            rg,
        ))
    }

    /// Threshold crossing `o = H(u - threshold)`; backward uses `g'(u - threshold)`.
    pub fn spike(&mut self, input: Var, threshold: T) -> Var {
        let mode = self.spike_forward;
        let t = self.value(input).map(|u| match mode {
            SpikeForward::Heaviside => {
                if u >= threshold {
                    T::one()
                } else {
                    T::zero()
                }
            }
            SpikeForward::Surrogate => T::of(arctan_surrogate((u - threshold).as_f64())),
        });
        let rg = self.rg(input);
        self.push(t, Op::Spike { input, threshold }, rg)
    }

    /// Divides each pixel's channel vector by its Euclidean norm. Pixels whose norm
    /// is below `1e-8` become `(0, .., 0, 1)` and pass no gradient.
    pub fn normalize_pixels(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_norm = vec![T::zero(); n * hw];
        for s in 0..n {
            for p in 0..hw {
                let norm = (0..c)
                    .map(|ch| {
                        let v = x[(s * c + ch) * hw + p].as_f64();
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                if norm < 1e-8 {
                    out[(s * c + c - 1) * hw + p] = T::one();
                } else {
                    let inv = T::of(1.0 / norm);
                    inv_norm[s * hw + p] = inv;
                    for ch in 0..c {
                        let i = (s * c + ch) * hw + p;
                        out[i] = x[i] * inv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::NormalizePixels { input, inv_norm }, rg))
    }

    /// `sum_p weights[p] * (1 - <pred_p, target_p>)` over pixels of `[N, C, H, W]`
    /// maps; `weights` has `N * H * W` entries.
    pub fn weighted_cosine(&mut self, pred: Var, target: &Tensor<T>, weights: Vec<T>) -> Result<Var> {
        same_shape(self.value(pred), target, "weighted_cosine")?;
        let (n, c, h, w) = self.value(pred).dims4()?;
        let hw = h * w;
        if weights.len() != n * hw {
            return Err(Error::Dimension(format!(
                "weighted_cosine: {} weights for {} pixels",
                weights.len(),
                n * hw
            )));
        }
        let p = self.value(pred).data();
        let tg = target.data();
        let mut loss = 0.0f64;
        for s in 0..n {
            for px in 0..hw {
                let wt = weights[s * hw + px];
                if wt == T::zero() {
                    continue;
                }
                let dot: f64 = (0..c)
                    .map(|ch| {
                        let i = (s * c + ch) * hw + px;
                        p[i].as_f64() * tg[i].as_f64()
                    })
                    .sum();
                loss += wt.as_f64() * (1.0 - dot);
            }
        }
        let t = Tensor::scalar(T::of(loss));
        let rg = self.rg(pred);
        Ok(self.push(
            t,
            Op::WeightedCosine {
                pred,
                target: target.data().to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively over
    /// fan-out, so an unrolled recurrence receives the sum of its per-step terms.
    /// The recorded operations are released afterwards; a second call fails with
    /// [`Error::StaleTape`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state == TapeState::Consumed {
            return Err(Error::StaleTape);
        }
        if self.nodes.is_empty() {
            return Err(Error::StaleTape);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &op, &g);
            if self.retain_grads || matches!(op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
            }
            for (v, dv) in contributions {
                self.accumulate(v, dv);
            }
        }
        for node in &mut self.nodes[loss.0 + 1..] {
            node.op = Op::Leaf;
        }
        self.state = TapeState::Consumed;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, dv: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(dv) {
                    *a += b;
                }
            }
            None => node.grad = Some(dv),
        }
    }

    fn local_grads(&self, i: usize, op: &Op<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(va).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|&gv| gv * *f).collect())),
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                out.push((*a, g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect()));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4().expect("conv input rank");
                let c_out = self.value(*weight).shape()[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    x.data(),
                    Dims4::new(n, c, h, w),
                    self.value(*weight).data(),
                    c_out,
                    *k,
                    g,
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    out.push((*b, db));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                out.push((
                    *input,
                    kernels::max_pool2_backward(g, argmax, self.value(*input).len()),
                ));
            }
            Op::Upsample { input, mode } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("upsample rank");
                let dims = Dims4::new(n, c, h, w);
                let dx = match mode {
                    UpsampleMode::Nearest => kernels::upsample_nearest_backward(g, dims),
                    UpsampleMode::Bilinear => kernels::upsample_bilinear_backward(g, dims),
                };
                out.push((*input, dx));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("concat rank");
                let cb = self.value(*b).shape()[1];
                let (ga, gb) = kernels::split_channels(g, ca, cb, n, h * w);
                if self.rg(*a) {
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    out.push((*b, gb));
                }
            }
            Op::ChannelNorm {
                input,
                gain,
                bias,
                groups,
                batch_stats,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("norm rank");
                let hw = h * w;
                let per_group = n / groups;
                let gains = self.value(*gain).data();
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                // per (group, channel): sum(dy), sum(dy * xhat)
                let mut s1 = vec![0.0f64; groups * c];
                let mut s2 = vec![0.0f64; groups * c];
                for s in 0..n {
                    let grp = s / per_group;
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let mut a = 0.0f64;
                        let mut b = 0.0f64;
                        for j in base..base + hw {
                            a += g[j].as_f64();
                            b += (g[j] * xhat[j]).as_f64();
                        }
                        s1[grp * c + ch] += a;
                        s2[grp * c + ch] += b;
                    }
                }
                for grp in 0..*groups {
                    for ch in 0..c {
                        dbias[ch] += T::of(s1[grp * c + ch]);
                        dgain[ch] += T::of(s2[grp * c + ch]);
                    }
                }
                if self.rg(*input) {
                    let m = (per_group * hw) as f64;
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        let grp = s / per_group;
                        for ch in 0..c {
                            let idx = grp * c + ch;
                            let scale = gains[ch] * inv_std[idx];
                            let base = (s * c + ch) * hw;
                            if *batch_stats {
                                let mean_g = T::of(s1[idx] / m);
                                let mean_gx = T::of(s2[idx] / m);
                                for j in base..base + hw {
                                    dx[j] = scale * (g[j] - mean_g - xhat[j] * mean_gx);
                                }
                            } else {
                                for j in base..base + hw {
                                    dx[j] = scale * g[j];
                                }
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.rg(*gain) {
                    out.push((*gain, dgain));
                }
                if self.rg(*bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::SliceLeading { input, start } => {
                let full = self.value(*input);
                let stride = full.len() / full.shape()[0].max(1);
                let mut dx = vec![T::zero(); full.len()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                out.push((*input, dx));
            }
            Op::StackLeading(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        out.push((p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::Membrane {
                prev,
                drive,
                leak,
                reset,
            } => {
                let leak_value = match leak {
                    Leak::None => T::one(),
                    Leak::Const(a) => *a,
                    Leak::Param(p) => self.value(*p).data()[0],
                };
                if self.rg(*drive) {
                    out.push((*drive, g.to_vec()));
                }
                match prev {
                    Some((u, o)) => {
                        let (uv, ov) = (self.value(*u).data(), self.value(*o).data());
                        if self.rg(*u) {
                            out.push((
                                *u,
                                g.iter()
                                    .zip(ov)
                                    .map(|(&gv, &o)| gv * leak_value * (T::one() - o))
                                    .collect(),
                            ));
                        }
                        if self.rg(*o) {
                            out.push((
                                *o,
                                g.iter()
                                    .zip(uv)
                                    .map(|(&gv, &u)| gv * leak_value * (*reset - u))
                                    .collect(),
                            ));
                        }
                        if let Leak::Param(p) = leak {
                            if self.rg(*p) {
                                let s = g
                                    .iter()
                                    .zip(uv.iter().zip(ov))
                                    .fold(T::zero(), |acc, (&gv, (&u, &o))| {
                                        acc + gv * (u * (T::one() - o) + *reset * o)
                                    });
                                out.push((*p, vec![s]));
                            }
                        }
                    }
                    None => {
                        if let Leak::Param(p) = leak {
                            if self.rg(*p) {
                                let s = g.iter().fold(T::zero(), |acc, &gv| acc + gv * *reset);
                                out.push((*p, vec![s]));
                            }
                        }
                    }
                }
            }
            Op::Spike { input, threshold } => {
                let u = self.value(*input).data();
                out.push((
                    *input,
                    g.iter()
                        .zip(u)
                        .map(|(&gv, &uv)| gv * T::of(arctan_surrogate_grad((uv - *threshold).as_f64())))
                        .collect(),
                ));
            }
            Op::NormalizePixels { input, inv_norm } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("normalize rank");
                let hw = h * w;
                let y = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); g.len()];
                for s in 0..n {
                    for p in 0..hw {
                        let inv = inv_norm[s * hw + p];
                        if inv == T::zero() {
                            continue;
                        }
                        let dot = (0..c).fold(T::zero(), |acc, ch| {
                            let j = (s * c + ch) * hw + p;
                            acc + y[j] * g[j]
                        });
                        for ch in 0..c {
                            let j = (s * c + ch) * hw + p;
                            dx[j] = (g[j] - y[j] * dot) * inv;
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::WeightedCosine {
                pred,
                target,
                weights,
            } => {
                let (n, c, h, w) = self.value(*pred).dims4().expect("cosine rank");
                let hw = h * w;
                let mut dp = vec![T::zero(); target.len()];
                for s in 0..n {
                    for p in 0..hw {
                        let wt = weights[s * hw + p];
                        for ch in 0..c {
                            let j = (s * c + ch) * hw + p;
                            dp[j] = -(g[0] * wt * target[j]);
                        }
                    }
                }
                out.push((*pred, dp));
            }
        }
        out
    }
}

//! Dense classifiers trained from scratch, FedAvg aggregation, evaluation.
//!
//! Both architectures are fully connected stacks with ReLU between layers
//! and softmax cross-entropy on top; softmax regression is the stack with
//! no hidden layer.
//!
//! Parameter layout (flat `Vec<f64>`): for each layer in order, the weight
//! matrix `out × in` in row-major order, followed by its `out` biases.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    Softmax { inputs: usize, classes: usize },
    /// Two hidden ReLU layers of width `hidden`.
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl Arch {
    pub fn mlp(inputs: usize, classes: usize) -> Self {
        Arch::Mlp {
            inputs,
            hidden: 64,
            classes,
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        match *self {
            Arch::Softmax { inputs, classes } => vec![inputs, classes],
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => vec![inputs, hidden, hidden, classes],
        }
    }

    pub fn inputs(&self) -> usize {
        self.widths()[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths().last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn tag(&self) -> u32 {
        match self {
            Arch::Softmax { .. } => 0,
            Arch::Mlp { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = seed::rng(seed, Stream::ModelInit, 0, 0);
        let mut values = Vec::with_capacity(arch.param_count());
        for w in arch.widths().windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * (w[0] + 1) {
                values.push(rng.random_range(-bound..bound));
            }
        }
        Self { arch, values }
    }

    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::invalid(format!(
                "{} values for an architecture with {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<()> {
        if data.dim() != self.arch.inputs() {
            return Err(Error::invalid(format!(
                "data has {} features, model expects {}",
                data.dim(),
                self.arch.inputs()
            )));
        }
        if data.classes() > self.arch.classes() {
            return Err(Error::invalid(format!(
                "data has {} classes, model outputs {}",
                data.classes(),
                self.arch.classes()
            )));
        }
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        Ok(())
    }

    /// Serializes to the checkpoint format:
    ///
    /// ```text
    /// offset  size  field
    /// 0       4     magic "FLSM"
    /// 4       4     format version (u32 LE) = 1
    /// 8       4     arch tag (u32 LE): 0 softmax, 1 mlp
    /// 12      4     inputs (u32 LE)
    /// 16      4     hidden width (u32 LE), 0 for softmax
    /// 20      4     classes (u32 LE)
    /// 24      8     d = parameter count (u64 LE)
    /// 32      8·d   parameters (f64 LE), layout as in the module docs
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let (inputs, hidden, classes) = match self.arch {
            Arch::Softmax { inputs, classes } => (inputs, 0, classes),
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => (inputs, hidden, classes),
        };
        let mut out = Vec::with_capacity(32 + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.arch.tag(), inputs as u32, hidden as u32, classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let u32_at = |off: usize, field: &str| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::format(field, "checkpoint truncated"))
        };
        if bytes.get(0..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::format("magic", "not a model checkpoint"));
        }
        let version = u32_at(4, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let inputs = u32_at(12, "inputs")? as usize;
        let hidden = u32_at(16, "hidden")? as usize;
        let classes = u32_at(20, "classes")? as usize;
        let arch = match u32_at(8, "arch")? {
            0 => Arch::Softmax { inputs, classes },
            1 => Arch::Mlp {
                inputs,
                hidden,
                classes,
            },
            t => return Err(Error::format("arch", format!("unknown arch tag {t}"))),
        };
        let d = bytes
            .get(24..32)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::format("d", "checkpoint truncated"))?;
        if d != arch.param_count() {
            return Err(Error::format(
                "d",
                format!("{d} parameters, architecture needs {}", arch.param_count()),
            ));
        }
        let body = bytes
            .get(32..32 + 8 * d)
            .ok_or_else(|| Error::format("params", "checkpoint truncated"))?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(arch, values).map_err(|e| Error::format("params", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FLSM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 10,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("learner.epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("learner.batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "learner.learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        v
    }
}

/// Where a training call runs, for error reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOrigin {
    pub round: usize,
    pub client: usize,
}

/// Per-sample forward/backward buffers.
struct Scratch {
    widths: Vec<usize>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(arch: Arch) -> Self {
        let widths = arch.widths();
        Self {
            acts: widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: widths.iter().map(|&w| vec![0.0; w]).collect(),
            widths,
        }
    }

    /// Runs the forward pass; leaves logits in the last activation slot.
    fn forward(&mut self, params: &[f64], x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let layers = self.widths.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w, rest) = params[off..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            let (prev, next) = self.acts.split_at_mut(l + 1);
            let input = &prev[l];
            for (o, out) in next[0].iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *out = if l + 1 < layers { z.max(0.0) } else { z };
            }
            off += n_out * (n_in + 1);
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Cross-entropy of the current logits against `label`.
    fn loss(&self, label: usize) -> f64 {
        let z = self.logits();
        log_sum_exp(z) - z[label]
    }

    /// Back-propagates the cross-entropy of the last forward pass and adds
    /// the parameter gradient into `grad`.
    fn backward(&mut self, params: &[f64], label: usize, grad: &mut [f64]) {
        let layers = self.widths.len() - 1;
        {
            let z = self.logits().to_vec();
            let lse = log_sum_exp(&z);
            let top = &mut self.deltas[layers];
            for (c, d) in top.iter_mut().enumerate() {
                *d = (z[c] - lse).exp() - if c == label { 1.0 } else { 0.0 };
            }
        }
        let offsets = layer_offsets(&self.widths);
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let (gw, gb) = grad[off..off + n_out * (n_in + 1)].split_at_mut(n_in * n_out);
            let input = &self.acts[l];
            let (lower, upper) = self.deltas.split_at_mut(l + 1);
            let delta = &upper[0];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &params[off..off + n_in * n_out];
                let below = &mut lower[l];
                below.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (v, wi) in below.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *v += d * wi;
                    }
                }
                // ReLU mask from the stored (post-activation) values.
                for (v, a) in below.iter_mut().zip(&self.acts[l]) {
                    if *a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

fn layer_offsets(widths: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(widths.len());
    let mut off = 0;
    for w in widths.windows(2) {
        offs.push(off);
        off += w[1] * (w[0] + 1);
    }
    offs
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn sum_loss(params: &ModelParams, data: &LabeledDataset) -> f64 {
    let mut s = Scratch::new(params.arch);
    (0..data.len())
        .map(|i| {
            s.forward(&params.values, data.row(i));
            s.loss(data.label(i))
        })
        .sum()
}

/// Mean cross-entropy `f_k(w)` over one client's data.
pub fn local_loss(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    params.check_data(data)?;
    Ok(sum_loss(params, data) / data.len() as f64)
}

/// Data-size-weighted loss over all partitions, `Σ (n_k/n) f_k(w)`.
pub fn global_loss(params: &ModelParams, partitions: &[LabeledDataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for p in partitions {
        params.check_data(p)?;
        total += sum_loss(params, p);
        n += p.len();
    }
    if n == 0 {
        return Err(Error::invalid("no data in any partition"));
    }
    Ok(total / n as f64)
}

/// Gradient of the mean cross-entropy over `data`.
pub fn gradient(params: &ModelParams, data: &LabeledDataset) -> Result<Vec<f64>> {
    params.check_data(data)?;
    let mut s = Scratch::new(params.arch);
    let mut g = vec![0.0; params.values.len()];
    for i in 0..data.len() {
        s.forward(&params.values, data.row(i));
        s.backward(&params.values, data.label(i), &mut g);
    }
    let inv = 1.0 / data.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

/// Mini-batch SGD on cross-entropy, reshuffling every epoch.
pub fn local_train(
    params: &ModelParams,
    data: &LabeledDataset,
    cfg: &LocalTrainConfig,
    origin: TrainOrigin,
) -> Result<ModelParams> {
    params.check_data(data)?;
    let mut w = params.values.clone();
    let mut s = Scratch::new(params.arch);
    let mut g = vec![0.0; w.len()];
    let mut rng = seed::rng(cfg.seed, Stream::Shuffle, 0, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            g.iter_mut().for_each(|v| *v = 0.0);
            for &i in batch {
                s.forward(&w, data.row(i));
                s.backward(&w, data.label(i), &mut g);
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    round: origin.round,
                    client: origin.client,
                    detail: "non-finite gradient".to_string(),
                });
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= step * gi;
            }
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            round: origin.round,
            client: origin.client,
            detail: "parameters diverged".to_string(),
        });
    }
    Ok(ModelParams {
        arch: params.arch,
        values: w,
    })
}

/// Weighted average of `updates` by sample count, reduced in list order.
/// Returns `base` when there is nothing to aggregate.
pub fn fedavg(updates: &[(ModelParams, usize)], base: &ModelParams) -> Result<ModelParams> {
    if updates.is_empty() {
        return Ok(base.clone());
    }
    if let Some((m, _)) = updates.iter().find(|(m, _)| m.arch != base.arch) {
        return Err(Error::invalid(format!(
            "cannot average {:?} into {:?}",
            m.arch, base.arch
        )));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::invalid("updates carry zero samples"));
    }
    let mut acc = vec![0.0; base.values.len()];
    for (m, n) in updates {
        let weight = *n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += weight * v;
        }
    }
    Ok(ModelParams {
        arch: base.arch,
        values: acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy (ties go to the lowest class) and mean cross-entropy.
pub fn evaluate(params: &ModelParams, test: &LabeledDataset) -> Result<Evaluation> {
    params.check_data(test)?;
    let mut s = Scratch::new(params.arch);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        s.forward(&params.values, test.row(i));
        let y = test.label(i);
        loss += s.loss(y);
        if argmax(s.logits()) == y {
            correct += 1;
        }
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Maximum relative error between the analytic gradient and central
/// differences with step `h`. Each coordinate's error is
/// `|a − n| / max(|a|, |n|, 1e-8)`; a zero step reports 0.
pub fn grad_check_with_step(params: &ModelParams, data: &LabeledDataset, h: f64) -> Result<f64> {
    if data.len() > 8 {
        return Err(Error::invalid(format!(
            "gradient check expects at most 8 samples, got {}",
            data.len()
        )));
    }
    let analytic = gradient(params, data)?;
    if h == 0.0 {
        return Ok(0.0);
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let up = local_loss(&probe, data)?;
        probe.values[i] = orig - h;
        let down = local_loss(&probe, data)?;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn grad_check(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    grad_check_with_step(params, data, FD_STEP)
}

//! Two-headed feedforward quantile network.
//!
//! Heads are `(lower, upper)`, trained jointly by the combined pinball loss
//! or by a sigmoid-smoothed quality-driven loss. Parameters live in one flat
//! vector: per layer, the row-major `out x in` weight matrix followed by the
//! `out` biases. The same layout is the payload of the binary model format.
//!
//! Binary format, version 1 (little-endian):
//!
//! ```text
//! b"IQRM"  u32 version  u32 n_widths  u32 widths[n_widths]  f64 params[..]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fit_scaler, lag_matrix, split_point, LagMatrix, MinMaxScaler};
use crate::error::{Error, Result};
use crate::metrics::{self, covered, qd_penalty_scale, soft_cover, IntervalBatch, QdParams, QD_SOFT_EPS};

const MAGIC: &[u8; 4] = b"IQRM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    inputs: usize,
    outputs: usize,
}

impl MlpModel {
    /// All-zero network with the given widths (input first, last must be 2).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) || widths[widths.len() - 1] != 2 {
            return Err(Error::InvalidParameter(format!(
                "layer widths {widths:?} must be positive and end in 2 outputs"
            )));
        }
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// He-style uniform initialization: weights in `+-sqrt(6 / fan_in)`, zero biases.
    pub fn he_uniform(widths: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in m.layers() {
            let limit = (6.0 / layer.inputs as f64).sqrt();
            for v in &mut m.params[layer.w..layer.w + layer.inputs * layer.outputs] {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(m)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(widths)?;
        if params.len() != m.params.len() {
            return Err(Error::InvalidParameter(format!(
                "{} parameters for a network needing {}",
                params.len(),
                m.params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite network parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> Vec<Layer> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let l = Layer {
                    w: off,
                    b: off + w[0] * w[1],
                    inputs: w[0],
                    outputs: w[1],
                };
                off = l.b + w[1];
                l
            })
            .collect()
    }

    /// Mask of entries subject to weight decay (weights, not biases).
    #[cfg(test)]
    fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for l in self.layers() {
            mask[l.w..l.b].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        let l = self.layers()[layer];
        self.params[l.w + row * l.inputs + col]
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, v: f64) {
        let l = self.layers()[layer];
        self.params[l.w + row * l.inputs + col] = v;
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, v: f64) {
        let l = self.layers()[layer];
        self.params[l.b + row] = v;
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::InvalidInput(format!(
                "{} features for a network with {} inputs",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Raw `(lower, upper)` head outputs.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        let out = self.forward_cached(x, &mut acts);
        Ok((out[0], out[1]))
    }

    /// Fills `acts` with the input and every layer's pre-activation; returns
    /// the output layer.
    fn forward_cached<'a>(&self, x: &[f64], acts: &'a mut Vec<Vec<f64>>) -> &'a [f64] {
        acts.clear();
        acts.push(x.to_vec());
        let layers = self.layers();
        for (k, l) in layers.iter().enumerate() {
            let input = &acts[acts.len() - 1];
            let relu = k > 0;
            let mut z = self.params[l.b..l.b + l.outputs].to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &self.params[l.w + r * l.inputs..l.w + (r + 1) * l.inputs];
                for (w, a) in row.iter().zip(input) {
                    *zr += w * if relu { a.max(0.0) } else { *a };
                }
            }
            acts.push(z);
        }
        &acts[acts.len() - 1]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.widths.len() as u32).to_le_bytes())?;
        for &width in &self.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("model file: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(|_| fmt("truncated header"))?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let n = read_u32(r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(fmt(&format!("implausible layer count {n}")));
        }
        let widths = (0..n).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut m = Self::zeros(&widths)?;
        let mut f64_buf = [0u8; 8];
        for v in m.params.iter_mut() {
            r.read_exact(&mut f64_buf).map_err(|_| fmt("truncated parameters"))?;
            *v = f64::from_le_bytes(f64_buf);
        }
        if r.read(&mut f64_buf).map_err(|_| fmt("read failed"))? != 0 {
            return Err(fmt("trailing bytes"));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Pinball,
    Qd,
}

/// Loss definition used for gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: LossKind,
    pub tau_low: f64,
    pub tau_high: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub softness: f64,
    pub l2: f64,
}

impl Objective {
    pub fn pinball(tau_low: f64, tau_high: f64, l2: f64) -> Self {
        Self {
            kind: LossKind::Pinball,
            tau_low,
            tau_high,
            alpha: 0.1,
            lambda: 0.0,
            softness: 1.0,
            l2,
        }
    }

    pub fn soft_qd(alpha: f64, lambda: f64, softness: f64, l2: f64) -> Self {
        Self {
            kind: LossKind::Qd,
            tau_low: alpha / 2.0,
            tau_high: 1.0 - alpha / 2.0,
            alpha,
            lambda,
            softness,
            l2,
        }
    }

    /// Data loss on head outputs plus the gradient with respect to each head.
    fn head_loss(&self, heads: &[(f64, f64)], y: &[f64]) -> (f64, Vec<(f64, f64)>) {
        let n = heads.len() as f64;
        match self.kind {
            LossKind::Pinball => {
                let slope = |q: f64, y: f64, tau: f64| if q >= y { 1.0 - tau } else { -tau };
                let mut loss = 0.0;
                let grads = heads
                    .iter()
                    .zip(y)
                    .map(|(&(l, u), &y)| {
                        loss += 0.5 * (metrics::pinball(l, y, self.tau_low) + metrics::pinball(u, y, self.tau_high));
                        (0.5 * slope(l, y, self.tau_low) / n, 0.5 * slope(u, y, self.tau_high) / n)
                    })
                    .collect();
                (loss / n, grads)
            }
            LossKind::Qd => {
                let s = self.softness;
                let parts: Vec<(f64, f64, f64)> = heads.iter().zip(y).map(|(&(l, u), &y)| soft_cover(l, u, y, s)).collect();
                let cap: f64 = parts.iter().map(|p| p.0).sum::<f64>() + QD_SOFT_EPS;
                let width: f64 = heads.iter().zip(&parts).map(|(&(l, u), p)| (u - l) * p.0).sum();
                let c = qd_penalty_scale(heads.len(), self.alpha, self.lambda);
                let short = ((1.0 - self.alpha) - cap / n).max(0.0);
                let loss = width / cap + c * short * short;
                let grads = heads
                    .iter()
                    .zip(&parts)
                    .map(|(&(l, u), &(k, a, b))| {
                        let dk = ((u - l) * cap - width) / (cap * cap) - 2.0 * c * short / n;
                        let dl = -k / cap - dk * s * (1.0 - a) * k;
                        let du = k / cap + dk * s * (1.0 - b) * k;
                        (dl, du)
                    })
                    .collect();
                (loss, grads)
            }
        }
    }
}

/// Batch loss (data term plus `l2 * sum(w^2)` over weights).
pub fn batch_loss(model: &MlpModel, features: &[Vec<f64>], targets: &[f64], obj: &Objective) -> Result<f64> {
    check_batch(model, features, targets)?;
    let heads: Vec<(f64, f64)> = features.iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
    Ok(obj.head_loss(&heads, targets).0 + l2_term(model, obj.l2))
}

fn l2_term(model: &MlpModel, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    model
        .layers()
        .iter()
        .map(|l| model.params[l.w..l.b].iter().map(|w| w * w).sum::<f64>())
        .sum::<f64>()
        * l2
}

fn check_batch(model: &MlpModel, features: &[Vec<f64>], targets: &[f64]) -> Result<()> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "batch of {} feature rows and {} targets",
            features.len(),
            targets.len()
        )));
    }
    features.iter().try_for_each(|x| model.check_input(x))
}

/// Batch loss and its exact gradient with respect to the flat parameters.
/// At a pinball kink the `q >= y` branch is used; ReLU has derivative 0 at 0.
pub fn backward(model: &MlpModel, features: &[Vec<f64>], targets: &[f64], obj: &Objective) -> Result<(f64, Vec<f64>)> {
    check_batch(model, features, targets)?;
    let mut grad = vec![0.0; model.params.len()];
    let loss = backward_into(model, features, targets, obj, &mut grad);
    Ok((loss, grad))
}

fn backward_into(model: &MlpModel, features: &[Vec<f64>], targets: &[f64], obj: &Objective, grad: &mut [f64]) -> f64 {
    let layers = model.layers();
    let mut caches: Vec<Vec<Vec<f64>>> = Vec::with_capacity(features.len());
    let mut heads = Vec::with_capacity(features.len());
    for x in features {
        let mut acts = Vec::new();
        let out = model.forward_cached(x, &mut acts);
        heads.push((out[0], out[1]));
        caches.push(acts);
    }
    let (loss, head_grads) = obj.head_loss(&heads, targets);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let p = &model.params;
    for (acts, hg) in caches.iter().zip(head_grads) {
        let mut delta = vec![hg.0, hg.1];
        for (k, l) in layers.iter().enumerate().rev() {
            let input = &acts[k];
            let relu = k > 0;
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grad[l.b + r] += d;
                let row = l.w + r * l.inputs;
                for (c, a) in input.iter().enumerate() {
                    grad[row + c] += d * if relu { a.max(0.0) } else { *a };
                }
            }
            if k == 0 {
                break;
            }
            let mut next = vec![0.0; l.inputs];
            for (c, nc) in next.iter_mut().enumerate() {
                if input[c] <= 0.0 {
                    continue;
                }
                for (r, d) in delta.iter().enumerate() {
                    *nc += d * p[l.w + r * l.inputs + c];
                }
            }
            delta = next;
        }
    }
    if obj.l2 != 0.0 {
        for l in &layers {
            for i in l.w..l.b {
                grad[i] += 2.0 * obj.l2 * p[i];
            }
        }
    }
    loss + l2_term(model, obj.l2)
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub tau_low: f64,
    pub tau_high: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub softness: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lags: usize,
    pub neurons: usize,
    pub layers: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pinball_default() -> Self {
        Self {
            loss: LossKind::Pinball,
            tau_low: 0.05,
            tau_high: 0.95,
            alpha: 0.1,
            lambda: 0.1,
            softness: 100.0,
            learning_rate: 1e-3,
            l2: 1e-5,
            batch_size: 32,
            max_epochs: 1000,
            patience: 50,
            lags: 5,
            neurons: 16,
            layers: 2,
            seed: 0,
        }
    }

    pub fn qd_default() -> Self {
        Self {
            loss: LossKind::Qd,
            batch_size: 64,
            ..Self::pinball_default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.lags];
        w.extend(std::iter::repeat_n(self.neurons, self.layers));
        w.push(2);
        w
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossKind::Pinball => Objective::pinball(self.tau_low, self.tau_high, self.l2),
            LossKind::Qd => Objective::soft_qd(self.alpha, self.lambda, self.softness, self.l2),
        }
    }

    /// Checks the tuning ranges. `lambda` and `l2` may also be exactly 0.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("training config: {what}")));
        let within = |v: f64, lo: f64, hi: f64| v >= lo && v <= hi;
        if !within(self.alpha, 1e-6, 1.0 - 1e-6) {
            return bad("alpha outside (0, 1)");
        }
        if !(within(self.tau_low, 0.01, 0.15) && within(self.tau_high, 0.8, 0.99)) {
            return bad("pinball levels outside [0.01, 0.15] / [0.8, 0.99]");
        }
        if !(self.lambda == 0.0 || within(self.lambda, 1e-2, 1.0)) {
            return bad("lambda outside [0.01, 1]");
        }
        if !within(self.softness, 50.0, 200.0) {
            return bad("softness outside [50, 200]");
        }
        if !within(self.learning_rate, 1e-5, 1e-2) {
            return bad("learning rate outside [1e-5, 1e-2]");
        }
        if !(self.l2 == 0.0 || within(self.l2, 1e-5, 1e-2)) {
            return bad("L2 coefficient outside [1e-5, 1e-2]");
        }
        if !(4..=128).contains(&self.neurons) || !(1..=3).contains(&self.layers) {
            return bad("architecture outside 4..=128 neurons, 1..=3 hidden layers");
        }
        if !(1..=12).contains(&self.lags) {
            return bad("lags outside 1..=12");
        }
        if !(8..=64).contains(&self.batch_size) {
            return bad("batch size outside 8..=64");
        }
        if !(1..=1000).contains(&self.max_epochs) || self.patience == 0 {
            return bad("epochs must be in 1..=1000 with positive patience");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Validation loss without weight decay.
fn validation_loss(model: &MlpModel, data: &LagMatrix, obj: &Objective) -> f64 {
    let o = Objective { l2: 0.0, ..*obj };
    batch_loss(model, &data.features, &data.targets, &o).unwrap_or(f64::NAN)
}

/// Mini-batch Adam with early stopping on a chronological 90/10 split.
/// Returns the parameters of the best validation epoch.
pub fn train(data: &LagMatrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.lags != cfg.lags {
        return Err(Error::InvalidInput(format!(
            "lag matrix has {} lags, config expects {}",
            data.lags, cfg.lags
        )));
    }
    let n_train = split_point(data.len(), 0.9)?;
    let train_part = data.slice(0..n_train);
    let val_part = data.slice(n_train..data.len());
    let obj = cfg.objective();
    let mut model = MlpModel::he_uniform(&cfg.widths(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_params = model.params.len();
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut best = (validation_loss(&model, &val_part, &obj), 0usize, model.clone());
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| train_part.features[i].clone()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| train_part.targets[i]).collect();
            let loss = backward_into(&model, &xs, &ys, &obj, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("non-finite training loss {loss}"),
                });
            }
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for i in 0..n_params {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                model.params[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            epoch_loss += loss;
            batches += 1;
        }
        let val_loss = validation_loss(&model, &val_part, &obj);
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: format!("non-finite validation loss {val_loss}"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, model) = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss,
    })
}

/// Forward on scaled lags, inverse-scale both heads, order them.
/// `recent` holds the last `p` observations in chronological order.
pub fn predict_interval(model: &MlpModel, scaler: &MinMaxScaler, recent: &[f64]) -> Result<(f64, f64)> {
    let x: Vec<f64> = recent.iter().rev().map(|&v| scaler.apply(v)).collect();
    let (a, b) = model.forward(&x)?;
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Ok((scaler.invert(lo), scaler.invert(hi)))
}

/// A trained network with the scaling it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMlp {
    pub model: MlpModel,
    pub scaler: MinMaxScaler,
    pub config: TrainConfig,
}

impl TrainedMlp {
    pub fn lags(&self) -> usize {
        self.config.lags
    }

    /// One-step interval from the tail of `history`.
    pub fn predict(&self, history: &[f64]) -> Result<(f64, f64)> {
        let p = self.lags();
        if history.len() < p {
            return Err(Error::InvalidInput(format!("history of {} values is shorter than {p} lags", history.len())));
        }
        predict_interval(&self.model, &self.scaler, &history[history.len() - p..])
    }
}

/// Scales `series` to `[0, 1]`, builds the lag matrix and trains.
pub fn fit_series(series: &[f64], cfg: &TrainConfig) -> Result<(TrainedMlp, TrainOutcome)> {
    let scaler = fit_scaler(series)?;
    let scaled = scaler.apply_all(series);
    let data = lag_matrix(&scaled, cfg.lags)?;
    let out = train(&data, cfg)?;
    Ok((
        TrainedMlp {
            model: out.model.clone(),
            scaler,
            config: cfg.clone(),
        },
        out,
    ))
}

/// Hyperparameter ranges for random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub l2: (f64, f64),
    pub neurons: (usize, usize),
    pub layers: (usize, usize),
    pub lags: (usize, usize),
    pub batch_size: (usize, usize),
    pub tau_low: (f64, f64),
    pub tau_high: (f64, f64),
    pub lambda: (f64, f64),
    pub softness: (f64, f64),
    pub max_epochs: usize,
    pub patience: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: (1e-5, 1e-2),
            l2: (1e-5, 1e-2),
            neurons: (4, 128),
            layers: (1, 3),
            lags: (1, 12),
            batch_size: (8, 64),
            tau_low: (0.01, 0.15),
            tau_high: (0.8, 0.99),
            lambda: (1e-2, 1.0),
            softness: (50.0, 200.0),
            max_epochs: 1000,
            patience: 50,
            trials: 40,
            seed: 0,
        }
    }
}

impl SearchSpace {
    /// Every range must be ordered and inside the default (widest) ranges.
    pub fn validate(&self) -> Result<()> {
        let full = Self::default();
        let f = |name: &str, r: (f64, f64), outer: (f64, f64)| {
            if r.0 <= r.1 && r.0 >= outer.0 && r.1 <= outer.1 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "search range {name} {r:?} not within {outer:?}"
                )))
            }
        };
        let u = |name: &str, r: (usize, usize), outer: (usize, usize)| {
            f(name, (r.0 as f64, r.1 as f64), (outer.0 as f64, outer.1 as f64))
        };
        f("learning_rate", self.learning_rate, full.learning_rate)?;
        f("l2", self.l2, full.l2)?;
        u("neurons", self.neurons, full.neurons)?;
        u("layers", self.layers, full.layers)?;
        u("lags", self.lags, full.lags)?;
        u("batch_size", self.batch_size, full.batch_size)?;
        f("tau_low", self.tau_low, full.tau_low)?;
        f("tau_high", self.tau_high, full.tau_high)?;
        f("lambda", self.lambda, full.lambda)?;
        f("softness", self.softness, full.softness)?;
        if self.trials == 0 {
            return Err(Error::InvalidParameter("random search needs at least one trial".into()));
        }
        if !(1..=1000).contains(&self.max_epochs) || self.patience == 0 {
            return Err(Error::InvalidParameter("epochs must be in 1..=1000 with positive patience".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, kind: LossKind, alpha: f64, index: usize) -> TrainConfig {
        let log_uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo.ln()..=hi.ln()).exp()
            }
        };
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let int = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| rng.random_range(lo..=hi);
        TrainConfig {
            loss: kind,
            alpha,
            learning_rate: log_uniform(rng, self.learning_rate),
            l2: log_uniform(rng, self.l2),
            neurons: int(rng, self.neurons),
            layers: int(rng, self.layers),
            lags: int(rng, self.lags),
            batch_size: int(rng, self.batch_size),
            tau_low: uniform(rng, self.tau_low),
            tau_high: uniform(rng, self.tau_high),
            lambda: uniform(rng, self.lambda),
            softness: uniform(rng, self.softness),
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: TrainConfig,
    /// Training-objective validation loss at the best epoch.
    pub val_loss: Option<f64>,
    /// Criterion the trials are ranked by (lower is better).
    pub selection_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best: TrainedMlp,
    pub trials: Vec<TrialRecord>,
}

impl SearchOutcome {
    pub fn best_config(&self) -> &TrainConfig {
        &self.best.config
    }
}

/// Validation score comparable across trials: pinball at the nominal
/// `alpha/2`, `1 - alpha/2` levels for PB, hard QD (`lambda = 1`) for QD,
/// both in scaled units on the validation rows.
fn selection_score(m: &TrainedMlp, scaled: &[f64], alpha: f64) -> Result<f64> {
    let data = lag_matrix(scaled, m.config.lags)?;
    let n_train = split_point(data.len(), 0.9)?;
    let val = data.slice(n_train..data.len());
    let (mut lo, mut hi) = (Vec::with_capacity(val.len()), Vec::with_capacity(val.len()));
    for x in &val.features {
        let (a, b) = m.model.forward(x)?;
        lo.push(a.min(b));
        hi.push(a.max(b));
    }
    match m.config.loss {
        LossKind::Pinball => metrics::combined_pinball(&[lo, hi], &val.targets, &[alpha / 2.0, 1.0 - alpha / 2.0]),
        LossKind::Qd => {
            let batch = IntervalBatch::new(lo, hi, alpha)?;
            metrics::qd_loss(
                &batch,
                &val.targets,
                &QdParams {
                    lambda: 1.0,
                    softness: 1.0,
                    hard: true,
                },
            )
        }
    }
}

/// Seeded random search. Trial `i` trains with seed `space.seed + i`; ties
/// go to the lower trial index.
pub fn random_search(space: &SearchSpace, kind: LossKind, alpha: f64, series: &[f64]) -> Result<SearchOutcome> {
    space.validate()?;
    let scaler = fit_scaler(series)?;
    let scaled = scaler.apply_all(series);
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let mut trials = Vec::with_capacity(space.trials);
    let mut best: Option<(f64, usize, TrainedMlp)> = None;
    for index in 0..space.trials {
        let config = space.sample(&mut rng, kind, alpha, index);
        let attempt = lag_matrix(&scaled, config.lags).and_then(|d| train(&d, &config)).and_then(|out| {
            let trained = TrainedMlp {
                model: out.model.clone(),
                scaler,
                config: config.clone(),
            };
            let score = selection_score(&trained, &scaled, alpha)?;
            Ok((out, trained, score))
        });
        match attempt {
            Ok((out, trained, score)) => {
                trials.push(TrialRecord {
                    index,
                    config,
                    val_loss: Some(out.best_val_loss),
                    selection_score: Some(score),
                    best_epoch: Some(out.best_epoch),
                    error: None,
                });
                if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                    best = Some((score, index, trained));
                }
            }
            Err(e) => {
                log::warn!("search trial {index} failed: {e}");
                trials.push(TrialRecord {
                    index,
                    config,
                    val_loss: None,
                    selection_score: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (_, best_index, best) = best.ok_or_else(|| Error::Optimization {
        message: format!("all {} search trials failed", space.trials),
        best_value: f64::NAN,
    })?;
    Ok(SearchOutcome {
        best_index,
        best,
        trials,
    })
}

/// Fraction of `(lower, upper)` rows covering `y`, for quick diagnostics.
pub fn coverage(intervals: &[(f64, f64)], y: &[f64]) -> f64 {
    let hits = intervals.iter().zip(y).filter(|((l, u), y)| covered(*l, *u, **y)).count();
    hits as f64 / y.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_model(widths: &[usize], rng: &mut ChaCha8Rng) -> MlpModel {
        let mut m = MlpModel::zeros(widths).unwrap();
        for v in m.params_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    /// Straightforward re-implementation with explicit matrices.
    fn reference_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n_layers = m.widths().len() - 1;
        let mut off = 0;
        for k in 0..n_layers {
            let (i, o) = (m.widths()[k], m.widths()[k + 1]);
            let w = &m.params()[off..off + i * o];
            let b = &m.params()[off + i * o..off + i * o + o];
            off += i * o + o;
            let mut z = vec![0.0; o];
            for r in 0..o {
                z[r] = b[r] + (0..i).map(|c| w[r * i + c] * a[c]).sum::<f64>();
            }
            a = if k + 1 < n_layers { z.iter().map(|v| v.max(0.0)).collect() } else { z };
        }
        a
    }

    #[test]
    fn zero_and_identity_networks() {
        let z = MlpModel::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(z.forward(&[1.0, 2.0, 3.0]).unwrap(), (0.0, 0.0));
        let mut id = MlpModel::zeros(&[3, 2]).unwrap();
        id.set_weight(0, 0, 0, 1.0);
        id.set_weight(0, 1, 1, 1.0);
        assert_eq!(id.forward(&[0.3, -0.7, 9.0]).unwrap(), (0.3, -0.7));
        assert!(id.forward(&[1.0]).is_err());
        assert!(MlpModel::zeros(&[3, 3]).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = random_model(&[4, 7, 5, 2], &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = m.forward(&x).unwrap();
            let r = reference_forward(&m, &x);
            assert!((a - r[0]).abs() < 1e-12 && (b - r[1]).abs() < 1e-12);
        }
    }

    fn off_kink(m: &MlpModel, xs: &[Vec<f64>], ys: &[f64], obj: &Objective) -> bool {
        let margin = 1e-3;
        let mut heads = Vec::new();
        for x in xs {
            let mut acts = Vec::new();
            m.forward_cached(x, &mut acts);
            if acts[1..acts.len() - 1].iter().flatten().any(|z| z.abs() < margin) {
                return false;
            }
            let o = &acts[acts.len() - 1];
            heads.push((o[0], o[1]));
        }
        match obj.kind {
            LossKind::Pinball => heads.iter().zip(ys).all(|(&(l, u), y)| (l - y).abs() > margin && (u - y).abs() > margin),
            LossKind::Qd => {
                let cap: f64 = heads.iter().zip(ys).map(|(&(l, u), &y)| soft_cover(l, u, y, obj.softness).0).sum();
                ((1.0 - obj.alpha) - cap / ys.len() as f64).abs() > margin
            }
        }
    }

    fn gradient_check(obj: Objective, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        while checked < 100 {
            let m = random_model(&[3, 6, 5, 2], &mut rng);
            let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let ys: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            if !off_kink(&m, &xs, &ys, &obj) {
                continue;
            }
            let (_, g) = backward(&m, &xs, &ys, &obj).unwrap();
            let h = 1e-5;
            for i in 0..m.params().len() {
                let mut plus = m.clone();
                plus.params_mut()[i] += h;
                let mut minus = m.clone();
                minus.params_mut()[i] -= h;
                let fd = (batch_loss(&plus, &xs, &ys, &obj).unwrap() - batch_loss(&minus, &xs, &ys, &obj).unwrap()) / (2.0 * h);
                // Entries below 1e-3 sit near the difference-quotient noise floor.
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(rel < 1e-4, "param {i}: analytic {} vs numeric {fd}", g[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn pinball_gradients_match_finite_differences() {
        gradient_check(Objective::pinball(0.05, 0.95, 1e-3), 7);
    }

    #[test]
    fn soft_qd_gradients_match_finite_differences() {
        gradient_check(Objective::soft_qd(0.1, 0.5, 50.0, 1e-3), 8);
    }

    #[test]
    fn zero_network_bias_gradients_are_pinball_slopes() {
        let m = MlpModel::zeros(&[2, 4, 2]).unwrap();
        let obj = Objective::pinball(0.1, 0.9, 0.0);
        let (_, g) = backward(&m, &[vec![0.5, 0.5]], &[0.0], &obj).unwrap();
        // Output biases are the last two parameters; q = y uses the q >= y branch.
        let n = g.len();
        assert_eq!(g[n - 2], 0.5 * (1.0 - 0.1));
        assert_eq!(g[n - 1], 0.5 * (1.0 - 0.9));
        assert!(g[..n - 2].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_decay_is_linear_in_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&[2, 3, 2], &mut rng);
        let xs = vec![vec![0.2, 0.9], vec![0.6, 0.1]];
        let ys = [0.3, -0.2];
        let g0 = backward(&m, &xs, &ys, &Objective::pinball(0.05, 0.95, 0.0)).unwrap().1;
        let g1 = backward(&m, &xs, &ys, &Objective::pinball(0.05, 0.95, 0.01)).unwrap().1;
        let g2 = backward(&m, &xs, &ys, &Objective::pinball(0.05, 0.95, 0.02)).unwrap().1;
        let mask = m.weight_mask();
        for i in 0..g0.len() {
            let (d1, d2) = (g1[i] - g0[i], g2[i] - g0[i]);
            assert!((d2 - 2.0 * d1).abs() < 1e-14);
            if !mask[i] {
                assert_eq!(d1, 0.0);
            }
        }
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&[5, 8, 3, 2], &mut rng);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"IQRM");
        assert_eq!(MlpModel::read_from(&mut buf.as_slice()).unwrap(), m);
        assert!(MlpModel::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(MlpModel::read_from(&mut bad.as_slice()).is_err());
        let mut longer = buf;
        longer.push(0);
        assert!(MlpModel::read_from(&mut longer.as_slice()).is_err());
    }

    #[test]
    fn prediction_ordering_and_scaling() {
        let mut m = MlpModel::zeros(&[1, 2]).unwrap();
        m.set_bias(0, 0, 0.7);
        m.set_bias(0, 1, 0.3);
        let id = MinMaxScaler::identity();
        assert_eq!(predict_interval(&m, &id, &[5.0]).unwrap(), (0.3, 0.7));
        let zero = MlpModel::zeros(&[1, 2]).unwrap();
        assert_eq!(predict_interval(&zero, &id, &[5.0]).unwrap(), (0.0, 0.0));
        let mut w = MlpModel::zeros(&[1, 2]).unwrap();
        w.set_bias(0, 0, 0.4);
        w.set_bias(0, 1, 0.5);
        let s = MinMaxScaler::new(-50.0, 50.0).unwrap();
        let (lo, hi) = predict_interval(&w, &s, &[0.0]).unwrap();
        assert!((hi - lo - 10.0).abs() < 1e-9);
    }

    fn constant_input_data(n: usize, seed: u64) -> (LagMatrix, Vec<f64>, MinMaxScaler) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let scaler = fit_scaler(&ys).unwrap();
        let data = LagMatrix {
            features: vec![vec![0.5]; n],
            targets: scaler.apply_all(&ys),
            lags: 1,
        };
        (data, ys, scaler)
    }

    fn constant_config() -> TrainConfig {
        TrainConfig {
            lags: 1,
            neurons: 4,
            layers: 1,
            learning_rate: 1e-3,
            l2: 0.0,
            batch_size: 64,
            max_epochs: 600,
            patience: 50,
            ..TrainConfig::pinball_default()
        }
    }

    #[test]
    fn constant_input_recovers_sample_quantiles() {
        // Best-epoch selection leans toward the validation sample, so the
        // property is checked on the median over seeds.
        let se = (0.05f64 * 0.95 / 5000.0).sqrt() / 0.103_136;
        let mut errs = Vec::new();
        for seed in 0..10 {
            let (data, ys, scaler) = constant_input_data(5000, seed);
            let out = train(&data, &TrainConfig { seed, ..constant_config() }).unwrap();
            let (a, b) = out.model.forward(&[0.5]).unwrap();
            let mut sorted = ys.clone();
            sorted.sort_by(f64::total_cmp);
            errs.push((scaler.invert(a) - sorted[250]).abs());
            errs.push((scaler.invert(b) - sorted[4750]).abs());
            let min_val = out.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
            assert!(out.best_val_loss <= min_val);
            assert!(out.best_val_loss <= out.history.last().unwrap().val_loss);
        }
        errs.sort_by(f64::total_cmp);
        let median = 0.5 * (errs[9] + errs[10]);
        assert!(median < 2.0 * se, "median error {median}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (data, _, _) = constant_input_data(800, 5);
        let cfg = TrainConfig { max_epochs: 20, ..constant_config() };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let c = train(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn qd_without_penalty_stops_capturing_width() {
        let (data, ys, _) = constant_input_data(1000, 6);
        let cfg = TrainConfig {
            lambda: 0.0,
            max_epochs: 100,
            ..TrainConfig {
                loss: LossKind::Qd,
                ..constant_config()
            }
        };
        let capt = |m: &MlpModel| {
            let rows: Vec<(f64, f64)> = data.features.iter().map(|x| m.forward(x).unwrap()).collect();
            let b = IntervalBatch::new(rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect(), 0.1).unwrap();
            metrics::piaw_capt(&b, &data.targets).unwrap()
        };
        let init = MlpModel::he_uniform(&cfg.widths(), cfg.seed).unwrap();
        let out = train(&data, &cfg).unwrap();
        assert!(capt(&out.model) <= capt(&init));
        assert!(capt(&out.model) < 0.05, "{}", capt(&out.model));
        assert_eq!(ys.len(), 1000);
    }

    #[test]
    fn divergence_names_epoch() {
        let data = LagMatrix {
            features: vec![vec![f64::MAX]; 40],
            targets: vec![0.0; 40],
            lags: 1,
        };
        match train(&data, &constant_config()) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_ranges() {
        assert!(TrainConfig::pinball_default().validate().is_ok());
        assert!(TrainConfig { tau_low: 0.3, ..TrainConfig::pinball_default() }.validate().is_err());
        assert!(TrainConfig { neurons: 200, ..TrainConfig::pinball_default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.1, ..TrainConfig::pinball_default() }.validate().is_err());
        assert!(SearchSpace { neurons: (2, 8), ..Default::default() }.validate().is_err());
        assert!(SearchSpace { trials: 0, ..Default::default() }.validate().is_err());
    }

    fn small_space(trials: usize) -> SearchSpace {
        SearchSpace {
            neurons: (4, 8),
            layers: (1, 2),
            lags: (1, 3),
            max_epochs: 15,
            patience: 5,
            trials,
            seed: 99,
            ..Default::default()
        }
    }

    fn ar_series(n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = 0.5 * x + e;
                x
            })
            .collect()
    }

    #[test]
    fn search_is_reproducible_and_picks_argmin() {
        let xs = ar_series(400);
        let a = random_search(&small_space(4), LossKind::Pinball, 0.1, &xs).unwrap();
        let b = random_search(&small_space(4), LossKind::Pinball, 0.1, &xs).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.best.model, b.best.model);
        let best = a.trials[a.best_index].selection_score.unwrap();
        assert!(a.trials.iter().all(|t| t.selection_score.unwrap() >= best));
        assert_eq!(a.trials[1].config.seed, 100);

        let single = random_search(&small_space(1), LossKind::Qd, 0.1, &xs).unwrap();
        assert_eq!((single.trials.len(), single.best_index), (1, 0));
        assert_eq!(single.best_config(), &single.trials[0].config);
    }
}

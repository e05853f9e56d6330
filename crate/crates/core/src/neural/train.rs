use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use super::mlp::{l2_loss, MlpGrads, MlpModel};
use super::{NeuralError, Result};
use crate::geometry::Vec2;

/// One imitation pair. `planner` is the raw planner trajectory resampled
/// onto the target's time grid, kept as the comparison baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: FeatureVector,
    pub target: Vec<Vec2>,
    #[serde(default)]
    pub planner: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Learning rate at the last epoch relative to the first, decayed
    /// geometrically per epoch.
    pub final_lr_fraction: f64,
    /// Share of samples held out for validation; 0 trains on everything.
    pub validation_fraction: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 40,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            final_lr_fraction: 0.05,
            validation_fraction: 0.2,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.validation_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.final_lr_fraction > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NeuralError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// Eval-mode loss over the training split after each epoch.
    pub train: Vec<f64>,
    /// Empty when no validation split.
    pub validation: Vec<f64>,
}

pub struct Adam {
    m: MlpGrads,
    v: MlpGrads,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &MlpModel, cfg: &TrainerConfig) -> Self {
        let zero = MlpGrads { layers: MlpModel::zeros(model.dims, 0.0).layers };
        Self { m: zero.clone(), v: zero, t: 0, lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.epsilon }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, model: &mut MlpModel, g: &MlpGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let (m, v) = (&mut self.m.layers[l], &mut self.v.layers[l]);
            update(layer.w.as_mut_slice(), g.layers[l].w.as_slice(), m.w.as_mut_slice(), v.w.as_mut_slice());
            update(layer.b.as_mut_slice(), g.layers[l].b.as_slice(), m.b.as_mut_slice(), v.b.as_mut_slice());
        }
    }
}

fn target_matrix(samples: &[&TrainingSample], rows: usize) -> Result<DMatrix<f64>> {
    for s in samples {
        if 2 * s.target.len() != rows {
            return Err(NeuralError::Shape(format!("target has {} waypoints, model outputs {}", s.target.len(), rows / 2)));
        }
    }
    Ok(DMatrix::from_fn(rows, samples.len(), |r, c| samples[c].target[r / 2][r % 2]))
}

/// One optimizer step on a batch; returns the (dropout-mode) batch loss.
pub fn train_step(model: &mut MlpModel, adam: &mut Adam, batch: &[&TrainingSample], rng: &mut ChaCha8Rng) -> Result<f64> {
    let feats: Vec<&FeatureVector> = batch.iter().map(|s| &s.features).collect();
    let (xh, xp) = model.batch_inputs(&feats)?;
    let t = target_matrix(batch, model.dims.output)?;
    let cache = model.forward_batch(xh, xp, Some(rng));
    let (loss, g) = model.loss_and_grad(&cache, &t);
    if !loss.is_finite() {
        return Err(NeuralError::Diverged);
    }
    adam.step(model, &g);
    Ok(loss)
}

/// Eval-mode mean L2 loss over samples.
pub fn evaluate(model: &MlpModel, samples: &[&TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let feats: Vec<&FeatureVector> = chunk.iter().map(|s| &s.features).collect();
        let (xh, xp) = model.batch_inputs(&feats)?;
        let t = target_matrix(chunk, model.dims.output)?;
        let loss = model.loss(&model.forward_batch(xh, xp, None), &t);
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean L2 of each sample's raw planner trajectory against its target.
pub fn planner_baseline(samples: &[&TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut total = 0.0;
    for s in samples {
        total += l2_loss(&s.planner, &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Deterministic train/validation split by seed.
pub fn split_indices(n: usize, cfg: &TrainerConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let n_val = ((n as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub fn train(mut model: MlpModel, data: &[TrainingSample], cfg: &TrainerConfig) -> Result<(MlpModel, LossHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let (mut train_idx, val_idx) = split_indices(data.len(), cfg);
    let val: Vec<&TrainingSample> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model, cfg);
    let mut hist = LossHistory::default();
    for epoch in 0..cfg.epochs {
        let u = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        adam.set_learning_rate(cfg.learning_rate * cfg.final_lr_fraction.powf(u));
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &data[i]).collect();
            train_step(&mut model, &mut adam, &batch, &mut rng)?;
        }
        let tr: Vec<&TrainingSample> = train_idx.iter().map(|&i| &data[i]).collect();
        let l = evaluate(&model, &tr)?;
        if !l.is_finite() {
            return Err(NeuralError::Diverged);
        }
        hist.train.push(l);
        if !val.is_empty() {
            hist.validation.push(evaluate(&model, &val)?);
        }
        log::debug!("epoch {epoch}: train {l:.4}");
    }
    Ok((model, hist))
}

pub fn write_dataset(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| NeuralError::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| NeuralError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| NeuralError::Io(e.to_string()))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingSample>> {
    let f = std::fs::File::open(path).map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| NeuralError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TrainingSample =
            serde_json::from_str(&line).map_err(|e| NeuralError::Format(format!("line {}: {e}", i + 1)))?;
        s.features.validate()?;
        out.push(s);
    }
    Ok(out)
}

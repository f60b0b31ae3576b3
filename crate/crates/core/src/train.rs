//! Mini-batch training with early stopping, and evaluation.

use std::time::Instant;

use dpn_tensor::{DType, Float, Graph, ParamStore, TensorError};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Split};
use crate::error::{DpnError, Result};
use crate::metrics::{auc, logloss, EvalReport};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{RngState, SeedStreams, SHUFFLE};

/// Element type used for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

fn default_patience() -> usize {
    3
}
fn default_eval_batch() -> usize {
    4096
}
fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "crate_b1")]
    pub beta1: f64,
    #[serde(default = "crate_b2")]
    pub beta2: f64,
    #[serde(default = "crate_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without validation AUC improvement before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub precision: Precision,
    /// Worker threads for evaluation.
    #[serde(default = "one")]
    pub threads: usize,
}

fn crate_b1() -> f64 {
    AdamConfig::new(0.0).beta1
}
fn crate_b2() -> f64 {
    AdamConfig::new(0.0).beta2
}
fn crate_eps() -> f64 {
    AdamConfig::new(0.0).eps
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            lr,
            beta1: crate_b1(),
            beta2: crate_b2(),
            eps: crate_eps(),
            batch_size,
            epochs,
            seed,
            patience: default_patience(),
            eval_batch_size: default_eval_batch(),
            precision: Precision::F64,
            threads: 1,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self, batch_norm: bool) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || (batch_norm && self.batch_size < 2) {
            return Err(DpnError::config(format!(
                "batch_size {} too small{}",
                self.batch_size,
                if batch_norm { " for batch normalization" } else { "" }
            )));
        }
        if self.eval_batch_size == 0 || self.threads == 0 {
            return Err(DpnError::config("eval_batch_size and threads must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_logloss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub steps: u64,
}

/// Model, optimizer and shuffle stream of one training run.
pub struct Trainer<T: Float> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
}

fn runtime_failure(e: &DpnError) -> bool {
    matches!(e, DpnError::Tensor(TensorError::Runtime(_)))
}

impl<T: Float> Trainer<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(model.spec.batch_norm)?;
        let adam = Adam::new(cfg.adam(), &model.store);
        Ok(Self { model, adam, rng: SeedStreams::new(cfg.seed).stream(SHUFFLE), cfg: cfg.clone() })
    }

    /// Continue a run from saved optimizer and shuffle-stream state.
    pub fn resume(model: Model<T>, adam: Adam<T>, rng: &RngState, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(model.spec.batch_norm)?;
        let mut adam = adam;
        adam.cfg = cfg.adam();
        Ok(Self { model, adam, rng: rng.restore(), cfg: cfg.clone() })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let labels: Vec<T> = batch.labels.iter().map(|&y| T::of(y)).collect();
        let (grads, updates, loss) = {
            let mut g = Graph::new(&self.model.store);
            let logits = self.model.forward(&mut g, batch)?;
            let loss = g.bce_with_logits(logits, &labels)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(DpnError::Tensor(TensorError::Runtime(format!("non-finite loss {lv}"))));
            }
            (g.backward(loss)?, g.take_buffer_updates(), lv)
        };
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(&grads);
        store.apply_buffer_updates(updates);
        self.adam.step(store);
        Ok(loss)
    }

    /// One shuffled pass over `rows`; returns the mean batch loss.
    pub fn epoch(&mut self, data: &Dataset, rows: &[usize]) -> Result<f64> {
        let mut order = rows.to_vec();
        order.shuffle(&mut self.rng);
        let min = if self.model.spec.batch_norm { 2 } else { 1 };
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < min {
                continue;
            }
            let b = data.batch(chunk);
            total += self.step(&b)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Train on the train split, early-stopping on validation AUC.
    ///
    /// On a non-finite loss the parameters from the start of the failing
    /// epoch are restored and [`DpnError::Diverged`] is returned.
    pub fn fit(&mut self, data: &Dataset) -> Result<TrainReport> {
        let train = data.indices(Split::Train);
        let val = data.indices(Split::Val);
        if train.is_empty() {
            return Err(DpnError::Data("train split is empty".into()));
        }
        let mut epochs = Vec::new();
        let mut best: Option<(f64, usize, ParamStore<T>)> = None;
        let mut since_best = 0;
        for epoch in 1..=self.cfg.epochs {
            let snapshot = (self.model.store.clone(), self.adam.clone());
            let t0 = Instant::now();
            let loss = match self.epoch(data, &train) {
                Ok(l) => l,
                Err(e) if runtime_failure(&e) => {
                    self.model.store = snapshot.0;
                    self.adam = snapshot.1;
                    return Err(DpnError::Diverged { epoch, step: self.adam.step as usize });
                }
                Err(e) => return Err(e),
            };
            let wall = t0.elapsed().as_secs_f64();
            let (val_auc, val_logloss) = if val.is_empty() {
                (None, None)
            } else {
                let probs = predict_rows(&self.model, data, &val, self.cfg.eval_batch_size, self.cfg.threads)?;
                let labels: Vec<f64> = val.iter().map(|&i| data.labels()[i]).collect();
                (auc(&probs, &labels).ok(), logloss(&probs, &labels).ok())
            };
            epochs.push(EpochReport { epoch, train_loss: loss, val_auc, val_logloss, wall_time_s: wall });
            if let Some(a) = val_auc {
                if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                    best = Some((a, epoch, self.model.store.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if self.cfg.patience > 0 && since_best >= self.cfg.patience {
                        break;
                    }
                }
            }
        }
        let best_epoch = match best {
            Some((_, e, store)) => {
                self.model.store = store;
                e
            }
            None => epochs.len(),
        };
        Ok(TrainReport { epochs, best_epoch, steps: self.adam.step })
    }
}

/// Eval-mode probabilities for `rows`, optionally spread over threads.
pub fn predict_rows<T: Float>(
    model: &Model<T>,
    data: &Dataset,
    rows: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    let chunks: Vec<&[usize]> = rows.chunks(batch_size.max(1)).collect();
    if threads <= 1 || chunks.len() <= 1 {
        return model.predict(chunks.iter().map(|c| data.batch(c)));
    }
    let per = chunks.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| s.spawn(move || model.predict(group.iter().map(|c| data.batch(c)))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(rows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// AUC and logloss of `model` on one split.
pub fn evaluate<T: Float>(model: &Model<T>, data: &Dataset, split: Split, batch_size: usize, threads: usize) -> Result<EvalReport> {
    let rows = data.indices(split);
    evaluate_rows(model, data, &rows, batch_size, threads)
}

pub fn evaluate_rows<T: Float>(
    model: &Model<T>,
    data: &Dataset,
    rows: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let probs = predict_rows(model, data, rows, batch_size, threads)?;
    let labels: Vec<f64> = rows.iter().map(|&i| data.labels()[i]).collect();
    EvalReport::compute(&probs, &labels, model.param_count(), t0.elapsed().as_secs_f64())
}

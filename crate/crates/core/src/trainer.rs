//! Fitting a [`ConditionalFlow`] to simulated pairs.
//!
//! Round-one data are fitted by maximum likelihood. Later rounds use the
//! atomic proposal-corrected loss: every training pair is contrasted with
//! `n_atoms - 1` parameters drawn from the rest of its mini-batch, which
//! removes the proposal from the learned posterior without evaluating it.
//! The prior is uniform on the box, so it cancels from the atom logits.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::seed::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loss {
    MaximumLikelihood,
    Atomic { n_atoms: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 50,
            max_epochs: 500,
            patience: 20,
            validation_fraction: 0.1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("learning rate, batch size and epochs must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters in flow coordinates paired with observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub thetas: Array2<f64>,
    pub xs: Array2<f64>,
}

impl Dataset {
    pub fn new(thetas: Array2<f64>, xs: Array2<f64>) -> Result<Self> {
        if thetas.nrows() != xs.nrows() {
            return Err(Error::Shape {
                what: "dataset rows",
                expected: thetas.nrows(),
                got: xs.nrows(),
            });
        }
        Ok(Self { thetas, xs })
    }

    pub fn len(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            thetas: self.thetas.select(Axis(0), rows),
            xs: self.xs.select(Axis(0), rows),
        }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        let thetas = ndarray::concatenate(Axis(0), &[self.thetas.view(), other.thetas.view()])
            .map_err(|_| Error::Shape {
                what: "theta columns",
                expected: self.thetas.ncols(),
                got: other.thetas.ncols(),
            })?;
        let xs = ndarray::concatenate(Axis(0), &[self.xs.view(), other.xs.view()]).map_err(|_| Error::Shape {
            what: "x columns",
            expected: self.xs.ncols(),
            got: other.xs.ncols(),
        })?;
        Ok(Self { thetas, xs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Loss,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Stopped by patience rather than the epoch cap.
    pub converged: bool,
    pub n_train: usize,
    pub n_validation: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.validation_loss);
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean negative log-likelihood over `data` and its gradient.
pub fn nll_loss(flow: &ConditionalFlow, thetas: ArrayView2<f64>, xs: ArrayView2<f64>, grad: Option<&mut [f64]>) -> Result<f64> {
    let n = thetas.nrows() as f64;
    let lp = match grad {
        Some(g) => {
            let weights = vec![-1.0 / n; thetas.nrows()];
            flow.log_prob_with_grad(thetas, xs, &weights, g)?
        }
        None => flow.log_prob(thetas, xs)?,
    };
    Ok(-lp.iter().sum::<f64>() / n)
}

/// For each row `i`, indices of `n_atoms - 1` distinct other rows.
pub fn draw_atoms(n_rows: usize, n_atoms: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if n_atoms < 2 || n_atoms > n_rows {
        return Err(Error::Config(format!(
            "need 2 <= n_atoms <= batch rows, got {n_atoms} atoms for {n_rows} rows"
        )));
    }
    Ok((0..n_rows)
        .map(|i| {
            let mut others = rand::seq::index::sample(rng, n_rows - 1, n_atoms - 1).into_vec();
            for o in &mut others {
                if *o >= i {
                    *o += 1;
                }
            }
            others
        })
        .collect())
}

/// Atomic loss for given contrast sets, with optional gradient.
///
/// Row `i` is scored against `{θ_i} ∪ {θ_k : k ∈ atoms[i]}` under `x_i`:
/// `−log softmax_0(log q(θ_ij | x_i))`, averaged over rows.
pub fn atomic_loss_with_atoms(
    flow: &ConditionalFlow,
    thetas: ArrayView2<f64>,
    xs: ArrayView2<f64>,
    atoms: &[Vec<usize>],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let b = thetas.nrows();
    let k = atoms.first().map_or(0, |a| a.len() + 1);
    let d = thetas.ncols();
    let mut rows_theta = Array2::zeros((b * k, d));
    let mut rows_x = Array2::zeros((b * k, xs.ncols()));
    for i in 0..b {
        if atoms[i].iter().any(|&a| thetas.row(a) == thetas.row(i)) {
            return Err(Error::DuplicateAtoms);
        }
        for j in 0..k {
            let src = if j == 0 { i } else { atoms[i][j - 1] };
            rows_theta.row_mut(i * k + j).assign(&thetas.row(src));
            rows_x.row_mut(i * k + j).assign(&xs.row(i));
        }
    }
    let lp = flow.log_prob(rows_theta.view(), rows_x.view())?;
    let mut loss = 0.0;
    let mut weights = vec![0.0; b * k];
    for i in 0..b {
        let logits = &lp[i * k..(i + 1) * k];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        loss -= logits[0] - lse;
        for j in 0..k {
            let softmax = (logits[j] - lse).exp();
            weights[i * k + j] = (softmax - f64::from(u8::from(j == 0))) / b as f64;
        }
    }
    if let Some(g) = grad {
        // weights are dL/dlog q; log_prob_with_grad accumulates Σ w ∇ log q
        flow.log_prob_with_grad(rows_theta.view(), rows_x.view(), &weights, g)?;
    }
    Ok(loss / b as f64)
}

/// Atomic loss with atoms drawn from within the batch.
pub fn atomic_apt_loss(
    flow: &ConditionalFlow,
    thetas: ArrayView2<f64>,
    xs: ArrayView2<f64>,
    n_atoms: usize,
    rng: &mut Rng,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let atoms = draw_atoms(thetas.nrows(), n_atoms, rng)?;
    atomic_loss_with_atoms(flow, thetas, xs, &atoms, grad)
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Train `flow` in place on `data`; the parameters of the best validation
/// epoch are restored before returning. The flow's standardization is left
/// unchanged.
pub fn train(flow: &mut ConditionalFlow, data: &Dataset, loss: Loss, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let n = data.len();
    if n < 2 * config.batch_size {
        return Err(Error::DatasetTooSmall {
            min: 2 * config.batch_size,
            got: n,
        });
    }
    if let Loss::Atomic { n_atoms } = loss {
        if n_atoms < 2 || n_atoms > config.batch_size {
            return Err(Error::Config(format!(
                "n_atoms {n_atoms} must lie in [2, batch size {}]",
                config.batch_size
            )));
        }
    }
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - config.batch_size);
    let validation = data.select(&order[..n_val]);
    let training = data.select(&order[n_val..]);
    let n_train = training.len();

    // contrast sets for the validation loss are fixed once
    let val_atoms = match loss {
        Loss::Atomic { n_atoms } => Some(draw_atoms(n_val, n_atoms.min(n_val), &mut rng)?),
        Loss::MaximumLikelihood => None,
    };
    let evaluate = |flow: &ConditionalFlow| -> Result<f64> {
        match &val_atoms {
            Some(atoms) if atoms.first().is_some_and(|a| !a.is_empty()) => {
                atomic_loss_with_atoms(flow, validation.thetas.view(), validation.xs.view(), atoms, None)
            }
            Some(_) => Ok(0.0),
            None => nll_loss(flow, validation.thetas.view(), validation.xs.view(), None),
        }
    };

    let mut adam = Adam::new(flow.n_parameters(), config.learning_rate);
    let mut grad = vec![0.0; flow.n_parameters()];
    let mut best_params = flow.params().to_vec();
    let mut best = evaluate(flow)?;
    if !best.is_finite() {
        best = f64::INFINITY;
    }
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut idx: Vec<usize> = (0..n_train).collect();
    let mut converged = false;
    // a trailing partial batch is kept if it can still form atom sets
    let min_batch = match loss {
        Loss::Atomic { n_atoms } => n_atoms,
        Loss::MaximumLikelihood => 2,
    };
    for epoch in 1..=config.max_epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(config.batch_size).filter(|c| c.len() >= min_batch) {
            let batch = training.select(chunk);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let value = match loss {
                Loss::MaximumLikelihood => nll_loss(flow, batch.thetas.view(), batch.xs.view(), Some(&mut grad))?,
                Loss::Atomic { n_atoms } => {
                    atomic_apt_loss(flow, batch.thetas.view(), batch.xs.view(), n_atoms, &mut rng, Some(&mut grad))?
                }
            };
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            clip(&mut grad, config.clip_norm);
            adam.step(flow.params_mut(), &grad);
            total += value;
            batches += 1;
        }
        let validation_loss = evaluate(flow)?;
        if !validation_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            validation_loss,
        });
        if validation_loss < best {
            best = validation_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(flow.params());
        } else if epoch - best_epoch >= config.patience {
            converged = true;
            break;
        }
    }
    flow.set_params(&best_params);
    Ok(TrainReport {
        loss,
        epochs,
        best_epoch,
        best_validation_loss: best,
        converged,
        n_train,
        n_validation: n_val,
    })
}

/// Uniform random rows inside a box, used by tests and the benchmarks.
pub fn uniform_rows(n: usize, support: &[(f64, f64)], rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, support.len()), |(_, k)| {
        let (lo, hi) = support[k];
        rng.random_range(lo..hi)
    })
}

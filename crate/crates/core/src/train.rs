//! Adam training loop with per-step spectral projection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::{Model, PreparedUnit};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Consecutive gradient steps taken on each sampled batch.
    pub iterations_per_batch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            iterations_per_batch: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::contract("learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::contract("Adam needs betas in [0, 1) and eps > 0"));
        }
        if self.epochs == 0 || self.iterations_per_batch == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs, iterations and batch size must be positive"));
        }
        Ok(())
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            lr: cfg.lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub total: f64,
    pub factor: f64,
    pub outcome: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); epochs];
        for r in &self.records {
            sums[r.epoch].0 += r.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,total,factor,outcome\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.epoch, r.total, r.factor, r.outcome));
        }
        out
    }
}

/// Trains `model` in place on `units`. The treatment marginal is refit from
/// `units` first. On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`] carrying the parameters from before that step.
pub fn train(model: &mut Model, units: &[PreparedUnit], cfg: &TrainConfig) -> Result<LossHistory> {
    cfg.validate()?;
    if units.is_empty() {
        return Err(Error::contract("no training units"));
    }
    model.fit_marginal(units)?;
    let mut adam = Adam::new(&model.store, cfg);
    let mut history = LossHistory::default();
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut g = Graph::new();
    let mut iteration = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedUnit> = chunk.iter().map(|&i| &units[i]).collect();
            for _ in 0..cfg.iterations_per_batch {
                let seeds: Vec<u64> = batch
                    .iter()
                    .map(|u| derive_seed(cfg.seed, &[1 << 32 | iteration as u64, u.unit_id as u64]))
                    .collect();
                let last_good = model.store.clone();
                let diverged = |_| Error::Diverged {
                    iteration,
                    last_good: Box::new(last_good.clone()),
                };
                g.clear();
                let params = model.param_vars(&mut g);
                let loss = match model.batch_loss(&mut g, &params, &batch, &seeds) {
                    Ok(l) => l,
                    Err(e @ Error::Contract(_)) => return Err(e),
                    Err(e) => return Err(diverged(e)),
                };
                let total = g.scalar_value(loss.total);
                if !total.is_finite() {
                    return Err(diverged(Error::numerical("train", "non-finite loss")));
                }
                model.store.zero_grad();
                g.backward(loss.total, &mut model.store).map_err(diverged)?;
                adam.step(&mut model.store);
                model.store.project();
                if model.store.iter().any(|p| !p.value.is_finite()) {
                    return Err(diverged(Error::numerical("adam", "non-finite parameter")));
                }
                history.records.push(LossRecord {
                    iteration,
                    epoch,
                    total,
                    factor: loss.factor,
                    outcome: loss.outcome,
                });
                iteration += 1;
            }
        }
    }
    Ok(history)
}

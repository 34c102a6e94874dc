//! Normalized error metrics and test-split evaluation.

use serde::{Deserialize, Serialize};

use crate::baselines::Msm;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sim::UnitRecord;
use crate::tensor::Tensor;

/// `100 · sqrt(mean((ŷ - y)²)) / normalizer`.
pub fn rmse_percent(preds: &[f64], targets: &[f64], normalizer: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract("predictions and targets must align and be non-empty"));
    }
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(Error::contract(format!("normalizer must be positive, got {normalizer}")));
    }
    let mse = preds.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64;
    Ok(100.0 * mse.sqrt() / normalizer)
}

/// `max - min`, the documented normalizer.
pub fn value_range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitPredictions {
    /// One-step-ahead factual predictions of `y_1 .. y_{m-1}`.
    pub factual: Vec<f64>,
    /// Final outcome under the alternate plan.
    pub plan_final: f64,
}

pub trait Estimator {
    /// `plan` is an `m x j` treatment matrix on the unit's timestamps.
    fn predict_unit(&self, unit: &UnitRecord, plan: &Tensor) -> Result<UnitPredictions>;
}

/// A trained neural model with its evaluation seed.
pub struct NeuralEstimator<'a> {
    pub model: &'a Model,
    pub seed: u64,
}

impl Estimator for NeuralEstimator<'_> {
    fn predict_unit(&self, unit: &UnitRecord, plan: &Tensor) -> Result<UnitPredictions> {
        let prepared = self.model.prepare(&unit.observed())?;
        let mut out = self
            .model
            .predict_matrices(&prepared, &[unit.treatments().clone(), plan.clone()], self.seed)?;
        let plan_pred = out.pop().expect("two plans");
        Ok(UnitPredictions {
            factual: out.pop().expect("two plans"),
            plan_final: *plan_pred.last().expect("m >= 2"),
        })
    }
}

impl Estimator for Msm {
    fn predict_unit(&self, unit: &UnitRecord, plan: &Tensor) -> Result<UnitPredictions> {
        let obs = unit.observed();
        Ok(UnitPredictions {
            factual: self.predict_factual(&obs)?,
            plan_final: self.predict(&obs, plan)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_pct_factual: f64,
    pub rmse_pct_counterfactual: f64,
    pub ate_error: f64,
    pub ate_true: f64,
    pub ate_estimate: f64,
    pub n_units: usize,
    pub seed: u64,
    pub runtime_s: Option<f64>,
}

/// Scores `est` on `units` against the stored ground truth of plan
/// `plan_name`. The factual metric pools every one-step-ahead prediction;
/// the counterfactual metric uses final outcomes. Each is normalized by
/// the range of its own targets over `units`.
pub fn evaluate(est: &dyn Estimator, units: &[&UnitRecord], plan_name: &str, seed: u64) -> Result<MetricsReport> {
    if units.is_empty() {
        return Err(Error::contract("no evaluation units"));
    }
    let (mut f_pred, mut f_true) = (Vec::new(), Vec::new());
    let (mut cf_pred, mut cf_true) = (Vec::new(), Vec::new());
    let (mut ite_pred, mut ite_true) = (Vec::new(), Vec::new());
    for unit in units {
        let (plan, y_cf) = unit
            .counterfactual(plan_name)
            .ok_or_else(|| Error::contract(format!("unit {} has no plan {plan_name:?}", unit.unit_id())))?;
        let p = est.predict_unit(unit, &plan.treatments)?;
        let y = unit.outcomes();
        let last = y.len() - 1;
        let factual_final = *p.factual.last().expect("m >= 2");
        f_pred.extend_from_slice(&p.factual);
        f_true.extend_from_slice(&y[1..]);
        cf_pred.push(p.plan_final);
        cf_true.push(y_cf[last]);
        ite_pred.push(p.plan_final - factual_final);
        ite_true.push(y_cf[last] - y[last]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ate_true, ate_estimate) = (mean(&ite_true), mean(&ite_pred));
    let report = MetricsReport {
        rmse_pct_factual: rmse_percent(&f_pred, &f_true, value_range(&f_true))?,
        rmse_pct_counterfactual: rmse_percent(&cf_pred, &cf_true, value_range(&cf_true))?,
        ate_error: (ate_estimate - ate_true).abs(),
        ate_true,
        ate_estimate,
        n_units: units.len(),
        seed,
        runtime_s: None,
    };
    let values = [
        report.rmse_pct_factual,
        report.rmse_pct_counterfactual,
        report.ate_error,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("evaluate", "non-finite metric"));
    }
    Ok(report)
}

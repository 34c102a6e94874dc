//! Reference estimators: the no-deconfounding ablation and a marginal
//! structural model fit by weighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::outcome::{WeightClip, PROB_FLOOR};
use crate::sim::ObservedUnit;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Conf,
    Msm,
    Lipscde,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Conf, Method::Msm, Method::Lipscde];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Conf => "conf",
            Method::Msm => "msm",
            Method::Lipscde => "lipscde",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conf" => Ok(Method::Conf),
            "msm" => Ok(Method::Msm),
            "lipscde" => Ok(Method::Lipscde),
            other => Err(Error::Parse(format!("unknown method {other:?}"))),
        }
    }
}

/// The full pipeline without the confounder branch: substitutes are the
/// zero vector at every step.
pub fn conf_model(cfg: &ModelConfig, covariate_dim: usize, treatment_dim: usize, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        use_confounders: false,
        ..cfg.clone()
    };
    Model::new(cfg, covariate_dim, treatment_dim, seed)
}

/// Ridge added to a singular normal-equation system.
pub const RIDGE: f64 = 1e-6;
const NEWTON_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    /// Set when the design was singular and the ridge fallback was used.
    pub ridge_fallback: bool,
}

/// Minimizes `Σ w_i (y_i - x_i·β)²` through the normal equations
/// `XᵀWX β = XᵀW y`. `design` is `n x p`.
pub fn weighted_least_squares(design: &Tensor, y: &[f64], w: &[f64]) -> Result<LeastSquares> {
    let (n, p) = (design.rows(), design.cols());
    if y.len() != n || w.len() != n || n == 0 {
        return Err(Error::contract("design, targets and weights must align"));
    }
    if w.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract("weights must be nonnegative"));
    }
    let x = DMatrix::from_row_slice(n, p, design.data());
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..n {
        let row = x.row(i);
        for a in 0..p {
            let wa = w[i] * row[a];
            xtwy[a] += wa * y[i];
            for b in 0..p {
                xtwx[(a, b)] += wa * row[b];
            }
        }
    }
    let scale = (0..p).map(|i| xtwx[(i, i)].abs()).fold(0.0, f64::max);
    let well_posed = xtwx.clone().cholesky().filter(|c| {
        let l = c.l();
        let min = (0..p).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
        min * min > 1e-12 * scale
    });
    let (beta, ridge_fallback) = match well_posed {
        Some(c) => (c.solve(&xtwy), false),
        None => {
            let ridged = xtwx + DMatrix::identity(p, p) * RIDGE;
            let c = ridged
                .cholesky()
                .ok_or_else(|| Error::numerical("weighted_least_squares", "normal equations not solvable"))?;
            (c.solve(&xtwy), true)
        }
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("weighted_least_squares", "non-finite coefficients"));
    }
    Ok(LeastSquares {
        coefficients: beta.iter().copied().collect(),
        ridge_fallback,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-channel treatment model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Propensity {
    /// Logistic regression coefficients over `(1, x, a_prev)`.
    Logistic(Vec<f64>),
    /// The channel never varied in training; its marginal is used.
    Constant(f64),
}

impl Propensity {
    pub fn prob(&self, features: &[f64]) -> f64 {
        match self {
            Propensity::Logistic(beta) => sigmoid(beta.iter().zip(features).map(|(b, f)| b * f).sum()),
            Propensity::Constant(p) => *p,
        }
    }
}

/// Logistic regression by Newton's method with a tiny ridge for separable
/// data.
pub fn logistic_regression(design: &Tensor, labels: &[f64]) -> Result<Vec<f64>> {
    let (n, p) = (design.rows(), design.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::contract("design and labels must align"));
    }
    let x = DMatrix::from_row_slice(n, p, design.data());
    let mut beta = DVector::<f64>::zeros(p);
    for _ in 0..NEWTON_STEPS {
        let eta = &x * &beta;
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::identity(p, p) * RIDGE;
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            let row = x.row(i);
            let wgt = (mu * (1.0 - mu)).max(1e-12);
            for a in 0..p {
                grad[a] += (labels[i] - mu) * row[a];
                for b in 0..p {
                    hess[(a, b)] += wgt * row[a] * row[b];
                }
            }
        }
        grad -= &beta * RIDGE;
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::numerical("logistic_regression", "singular Hessian"))?
            .solve(&grad);
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("logistic_regression", "non-finite coefficients"));
    }
    Ok(beta.iter().copied().collect())
}

/// A unit carried forward onto the regular grid `t_0 + r·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularUnit {
    pub x: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    /// Grid index of every observation.
    pub obs_index: Vec<usize>,
    pub y: Vec<f64>,
}

/// Last-observation-carried-forward resampling.
pub fn locf(unit: &ObservedUnit<'_>, treatments: &Tensor, dt: f64) -> Result<RegularUnit> {
    if !(dt > 0.0) {
        return Err(Error::contract("grid step must be positive"));
    }
    let m = unit.len();
    if m == 0 || treatments.rows() != m {
        return Err(Error::contract("treatments must align with observations"));
    }
    let t0 = unit.timestamps[0];
    let obs_index: Vec<usize> = unit.timestamps.iter().map(|t| ((t - t0) / dt).round() as usize).collect();
    if obs_index.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("observations closer than the grid step"));
    }
    let len = obs_index[m - 1] + 1;
    let mut x = Vec::with_capacity(len);
    let mut a = Vec::with_capacity(len);
    let mut k = 0;
    for r in 0..len {
        while k + 1 < m && obs_index[k + 1] <= r {
            k += 1;
        }
        x.push(unit.x.row(k).to_vec());
        a.push(treatments.row(k).to_vec());
    }
    Ok(RegularUnit {
        x,
        a,
        obs_index,
        y: unit.y.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Msm {
    pub dt: f64,
    pub clip: WeightClip,
    pub propensity: Vec<Propensity>,
    pub marginal: Vec<f64>,
    /// Outcome coefficients over `(1, x, a)`.
    pub coefficients: Vec<f64>,
    pub ridge_fallback: bool,
}

fn outcome_features(reg: &RegularUnit, r: usize, a: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + reg.x[r].len() + a.len());
    f.push(1.0);
    f.extend_from_slice(&reg.x[r]);
    f.extend_from_slice(a);
    f
}

fn propensity_features(reg: &RegularUnit, r: usize, c: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 + reg.x[r].len());
    f.push(1.0);
    f.extend_from_slice(&reg.x[r]);
    f.push(if r > 0 { reg.a[r - 1][c] } else { 0.0 });
    f
}

impl Msm {
    /// Fits propensities, weights and the weighted outcome regression.
    pub fn fit(units: &[ObservedUnit<'_>], dt: f64, clip: WeightClip) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::contract("no training units"));
        }
        let j = units[0].a.cols();
        let regs = units
            .iter()
            .map(|u| locf(u, u.a, dt))
            .collect::<Result<Vec<_>>>()?;
        let mut marginal = vec![0.0; j];
        let mut rows = 0usize;
        for u in units {
            for k in 0..u.len() {
                for (c, m) in marginal.iter_mut().enumerate() {
                    *m += u.a.get(k, c);
                }
            }
            rows += u.len();
        }
        marginal.iter_mut().for_each(|m| *m /= rows as f64);

        let mut propensity = Vec::with_capacity(j);
        for c in 0..j {
            let mut design = Vec::new();
            let mut labels = Vec::new();
            for reg in &regs {
                for &r in &reg.obs_index {
                    design.extend(propensity_features(reg, r, c));
                    labels.push(reg.a[r][c]);
                }
            }
            let constant = labels.iter().all(|&l| l == labels[0]);
            propensity.push(if labels.is_empty() || constant {
                Propensity::Constant(marginal[c])
            } else {
                let width = design.len() / labels.len();
                Propensity::Logistic(logistic_regression(&Tensor::matrix(labels.len(), width, design)?, &labels)?)
            });
        }
        let mut msm = Self {
            dt,
            clip,
            propensity,
            marginal,
            coefficients: vec![],
            ridge_fallback: false,
        };
        let mut design = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        for reg in &regs {
            let sw = msm.stabilized_weights(reg);
            for k in 1..reg.obs_index.len() {
                let r = reg.obs_index[k] - 1;
                design.extend(outcome_features(reg, r, &reg.a[r]));
                y.push(reg.y[k]);
                w.push(sw[r]);
            }
        }
        if y.is_empty() {
            return Err(Error::contract("no outcome rows to fit"));
        }
        let width = design.len() / y.len();
        let ls = weighted_least_squares(&Tensor::matrix(y.len(), width, design)?, &y, &w)?;
        msm.coefficients = ls.coefficients;
        msm.ridge_fallback = ls.ridge_fallback;
        Ok(msm)
    }

    /// Clipped cumulative weight per grid index; only observed assignments
    /// contribute factors.
    pub fn stabilized_weights(&self, reg: &RegularUnit) -> Vec<f64> {
        let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let mut out = vec![1.0; reg.x.len()];
        let mut acc = 1.0;
        let mut next_obs = 0;
        for (r, slot) in out.iter_mut().enumerate() {
            if next_obs < reg.obs_index.len() && reg.obs_index[next_obs] == r {
                for (c, model) in self.propensity.iter().enumerate() {
                    let a = reg.a[r][c];
                    let p = clamp(model.prob(&propensity_features(reg, r, c)));
                    let pm = clamp(self.marginal[c]);
                    acc *= if a == 1.0 { pm / p } else { (1.0 - pm) / (1.0 - p) };
                }
                next_obs += 1;
            }
            *slot = acc.clamp(self.clip.low, self.clip.high);
        }
        out
    }

    /// Sum of the treatment coefficients: the effect of treating every
    /// channel versus none.
    pub fn treatment_effect(&self) -> f64 {
        let j = self.marginal.len();
        self.coefficients[self.coefficients.len() - j..].iter().sum()
    }

    fn predict_row(&self, reg: &RegularUnit, r: usize) -> f64 {
        outcome_features(reg, r, &reg.a[r])
            .iter()
            .zip(&self.coefficients)
            .map(|(f, b)| f * b)
            .sum()
    }

    /// Predictions of `y_1 .. y_{m-1}` from the carried-forward history.
    pub fn predict_factual(&self, unit: &ObservedUnit<'_>) -> Result<Vec<f64>> {
        let reg = locf(unit, unit.a, self.dt)?;
        Ok(reg.obs_index[1..].iter().map(|&r| self.predict_row(&reg, r - 1)).collect())
    }

    /// Final outcome under an `m x j` treatment matrix aligned with the
    /// unit's observations.
    pub fn predict(&self, unit: &ObservedUnit<'_>, plan: &Tensor) -> Result<f64> {
        if plan.cols() != self.marginal.len() {
            return Err(Error::contract("plan width differs from treatment count"));
        }
        let reg = locf(unit, plan, self.dt)?;
        if reg.obs_index.len() < 2 {
            return Err(Error::contract("a unit needs at least two observations"));
        }
        Ok(self.predict_row(&reg, reg.obs_index[reg.obs_index.len() - 1] - 1))
    }
}

//! Confounded, irregularly observed longitudinal data with counterfactual
//! ground truth.
//!
//! On the aligned grid `t = 0..horizon-1` (timestamps `t · dt_obs`):
//!
//! ```text
//! z_{t+1} = α_z z_t + σ_z ε
//! x_{t+1} = α_x x_t + c_z z_t 1 + σ_x ε
//! P(a_t^c = 1) = sigmoid(λ (γ w_z z_t + (1-γ) w_x mean(x_t)))
//! y_{t+1} = β_a mean(a_t) + β_x mean(x_t) + γ_y z_t + σ_y ε
//! ```
//!
//! `γ` is the confounding degree: at 0 treatment depends only on observed
//! covariates, at 1 only on the hidden `z`. Treatments do not feed back into
//! `x` or `z`, so a counterfactual plan changes outcomes only through the
//! `β_a` term, and the same noise draws are reused for every plan.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "lipscde-ds/1";
pub const PLAN_FLIP_FINAL: &str = "flip_final";
pub const PLAN_ALL_ZEROS: &str = "all_zeros";
/// Minimum observations a unit keeps after missingness is applied.
pub const MIN_OBSERVATIONS: usize = 4;

const TAG_UNIT: u64 = 1;
const TAG_MISSING: u64 = 2;
const TAG_SPLIT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_units: usize,
    pub horizon: usize,
    pub covariate_dim: usize,
    pub treatment_dim: usize,
    /// Confounding degree in `[0, 1]`.
    pub gamma: f64,
    pub missing_rate: f64,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub alpha_z: f64,
    pub alpha_x: f64,
    /// Loading of the hidden process on every covariate.
    pub coupling_z: f64,
    pub beta_a: f64,
    pub beta_x: f64,
    pub gamma_y: f64,
    pub w_z: f64,
    pub w_x: f64,
    /// Sharpness `λ` of the treatment logits.
    pub sharpness: f64,
    /// Scale of the initial `z_0` and `x_0` draws.
    pub init_scale: f64,
    /// Spacing of the aligned observation grid in time units.
    pub dt_obs: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_units: 1000,
            horizon: 30,
            covariate_dim: 5,
            treatment_dim: 3,
            gamma: 0.2,
            missing_rate: 0.0,
            sigma_z: 0.5,
            sigma_x: 0.1,
            sigma_y: 0.1,
            alpha_z: 0.8,
            alpha_x: 0.5,
            coupling_z: 1.0,
            beta_a: 1.0,
            beta_x: 0.5,
            gamma_y: 1.0,
            w_z: 1.0,
            w_x: 1.0,
            sharpness: 5.0,
            init_scale: 1.0,
            dt_obs: 0.05,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("invalid simulator config: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.n_units == 0 || self.covariate_dim == 0 || self.treatment_dim == 0 {
            return bad("unit count and dimensions must be positive");
        }
        if self.horizon < MIN_OBSERVATIONS {
            return bad("horizon too short");
        }
        if self.horizon - removed_count(self.horizon, self.missing_rate) < MIN_OBSERVATIONS {
            return bad("missing rate leaves too few observations");
        }
        if [self.sigma_z, self.sigma_x, self.sigma_y].iter().any(|s| !(*s >= 0.0)) {
            return bad("noise scales must be nonnegative");
        }
        if self.alpha_z.abs() >= 1.0 || self.alpha_x.abs() >= 1.0 {
            return bad("autoregressive coefficients must lie in (-1, 1)");
        }
        if !(self.dt_obs > 0.0) {
            return bad("dt_obs must be positive");
        }
        Ok(())
    }
}

fn removed_count(m: usize, rate: f64) -> usize {
    (rate * m as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPlan {
    pub name: String,
    /// `m x j` binary treatments aligned with the unit's timestamps.
    pub treatments: Tensor,
}

/// One unit's trajectory. The hidden confounder is only reachable through
/// [`UnitRecord::z_true`]; models consume [`UnitRecord::observed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    unit_id: usize,
    timestamps: Vec<f64>,
    x: Tensor,
    a: Tensor,
    y: Vec<f64>,
    z_true: Tensor,
    cf_plans: Vec<CounterfactualPlan>,
    y_cf: Vec<Vec<f64>>,
}

/// What a model may see of a unit.
#[derive(Clone, Copy, Debug)]
pub struct ObservedUnit<'a> {
    pub unit_id: usize,
    pub timestamps: &'a [f64],
    pub x: &'a Tensor,
    pub a: &'a Tensor,
    pub y: &'a [f64],
}

impl<'a> ObservedUnit<'a> {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

impl UnitRecord {
    /// Builds a record without counterfactual ground truth.
    pub fn new(unit_id: usize, timestamps: Vec<f64>, x: Tensor, a: Tensor, y: Vec<f64>) -> Result<Self> {
        let m = timestamps.len();
        if x.rows() != m || a.rows() != m || y.len() != m {
            return Err(Error::contract("record fields must have one row per timestamp"));
        }
        if a.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("treatments must be binary"));
        }
        Ok(Self {
            unit_id,
            timestamps,
            x,
            a,
            y,
            z_true: Tensor::zeros(&[m, 1]),
            cf_plans: vec![],
            y_cf: vec![],
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        unit_id: usize,
        timestamps: Vec<f64>,
        x: Tensor,
        a: Tensor,
        y: Vec<f64>,
        z_true: Tensor,
        cf_plans: Vec<CounterfactualPlan>,
        y_cf: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut rec = Self::new(unit_id, timestamps, x, a, y)?;
        let m = rec.len();
        if z_true.rows() != m || cf_plans.len() != y_cf.len() {
            return Err(Error::contract("inconsistent counterfactual or confounder fields"));
        }
        if cf_plans.iter().any(|p| p.treatments.rows() != m) || y_cf.iter().any(|y| y.len() != m) {
            return Err(Error::contract("counterfactual fields must align with timestamps"));
        }
        rec.z_true = z_true;
        rec.cf_plans = cf_plans;
        rec.y_cf = y_cf;
        Ok(rec)
    }

    pub fn observed(&self) -> ObservedUnit<'_> {
        ObservedUnit {
            unit_id: self.unit_id,
            timestamps: &self.timestamps,
            x: &self.x,
            a: &self.a,
            y: &self.y,
        }
    }

    pub fn unit_id(&self) -> usize {
        self.unit_id
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn treatments(&self) -> &Tensor {
        &self.a
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn z_true(&self) -> &Tensor {
        &self.z_true
    }

    pub fn cf_plans(&self) -> &[CounterfactualPlan] {
        &self.cf_plans
    }

    pub fn y_cf(&self) -> &[Vec<f64>] {
        &self.y_cf
    }

    /// Counterfactual plan and its outcome trajectory by name.
    pub fn counterfactual(&self, name: &str) -> Option<(&CounterfactualPlan, &[f64])> {
        let i = self.cf_plans.iter().position(|p| p.name == name)?;
        Some((&self.cf_plans[i], &self.y_cf[i]))
    }
}

struct UnitNoise {
    z0: f64,
    x0: Vec<f64>,
    eps_z: Vec<f64>,
    eps_x: Vec<Vec<f64>>,
    eps_y: Vec<f64>,
    assign: Vec<Vec<f64>>,
}

impl UnitNoise {
    fn draw(cfg: &SimConfig, unit_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(unit_seed);
        let (t, d, j) = (cfg.horizon, cfg.covariate_dim, cfg.treatment_dim);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let z0 = normal();
        let x0 = (0..d).map(|_| normal()).collect();
        let eps_z = (0..t).map(|_| normal()).collect();
        let eps_x = (0..t).map(|_| (0..d).map(|_| normal()).collect()).collect();
        let eps_y = (0..t).map(|_| normal()).collect();
        let assign = (0..t).map(|_| (0..j).map(|_| rng.random::<f64>()).collect()).collect();
        Self {
            z0,
            x0,
            eps_z,
            eps_x,
            eps_y,
            assign,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Hidden and covariate trajectories; neither depends on treatments.
fn latent_trajectories(cfg: &SimConfig, noise: &UnitNoise) -> (Vec<f64>, Vec<Vec<f64>>) {
    let t_len = cfg.horizon;
    let mut z = vec![cfg.init_scale * noise.z0];
    let mut x = vec![noise.x0.iter().map(|v| cfg.init_scale * v).collect::<Vec<_>>()];
    for t in 0..t_len - 1 {
        z.push(cfg.alpha_z * z[t] + cfg.sigma_z * noise.eps_z[t]);
        let next = x[t]
            .iter()
            .zip(&noise.eps_x[t])
            .map(|(xv, e)| cfg.alpha_x * xv + cfg.coupling_z * z[t] + cfg.sigma_x * e)
            .collect();
        x.push(next);
    }
    (z, x)
}

fn outcomes(cfg: &SimConfig, noise: &UnitNoise, z: &[f64], x: &[Vec<f64>], a: &Tensor) -> Vec<f64> {
    let mut y = vec![cfg.beta_x * mean(&x[0]) + cfg.gamma_y * z[0] + cfg.sigma_y * noise.eps_y[0]];
    for t in 0..cfg.horizon - 1 {
        y.push(
            cfg.beta_a * mean(a.row(t)) + cfg.beta_x * mean(&x[t]) + cfg.gamma_y * z[t] + cfg.sigma_y * noise.eps_y[t + 1],
        );
    }
    y
}

/// Standard alternate plans for a factual treatment matrix: flip every
/// channel of the last treatment that still affects the final outcome, and
/// withhold treatment throughout.
pub fn standard_plans(a: &Tensor) -> Vec<CounterfactualPlan> {
    let m = a.rows();
    let mut flip = a.clone();
    if m >= 2 {
        for v in flip.row_mut(m - 2) {
            *v = 1.0 - *v;
        }
    }
    vec![
        CounterfactualPlan {
            name: PLAN_FLIP_FINAL.into(),
            treatments: flip,
        },
        CounterfactualPlan {
            name: PLAN_ALL_ZEROS.into(),
            treatments: Tensor::zeros(a.shape()),
        },
    ]
}

/// Simulates one unit on the aligned grid with the standard plans stored.
pub fn simulate_unit(cfg: &SimConfig, unit_seed: u64) -> Result<UnitRecord> {
    simulate_unit_with_plans(cfg, unit_seed, 0, None)
}

/// Like [`simulate_unit`] but with caller-supplied alternate plans
/// (`None` stores the standard plans).
pub fn simulate_unit_with_plans(
    cfg: &SimConfig,
    unit_seed: u64,
    unit_id: usize,
    plans: Option<Vec<CounterfactualPlan>>,
) -> Result<UnitRecord> {
    cfg.validate()?;
    let noise = UnitNoise::draw(cfg, unit_seed);
    let (z, x) = latent_trajectories(cfg, &noise);
    let (t_len, j) = (cfg.horizon, cfg.treatment_dim);
    let mut a = Tensor::zeros(&[t_len, j]);
    for t in 0..t_len {
        let logit = cfg.sharpness * (cfg.gamma * cfg.w_z * z[t] + (1.0 - cfg.gamma) * cfg.w_x * mean(&x[t]));
        let p = sigmoid(logit);
        for c in 0..j {
            a.set(t, c, if noise.assign[t][c] < p { 1.0 } else { 0.0 });
        }
    }
    let y = outcomes(cfg, &noise, &z, &x, &a);
    let plans = plans.unwrap_or_else(|| standard_plans(&a));
    let mut y_cf = Vec::with_capacity(plans.len());
    for plan in &plans {
        if plan.treatments.shape() != a.shape() {
            return Err(Error::contract(format!("plan {} has the wrong shape", plan.name)));
        }
        y_cf.push(outcomes(cfg, &noise, &z, &x, &plan.treatments));
    }
    Ok(UnitRecord {
        unit_id,
        timestamps: (0..t_len).map(|t| t as f64 * cfg.dt_obs).collect(),
        x: Tensor::from_rows(&x)?,
        a,
        y,
        z_true: Tensor::matrix(t_len, 1, z)?,
        cf_plans: plans,
        y_cf,
    })
}

/// Removes `⌊rate·m⌋` interior time points chosen uniformly at random. The
/// first and last observation are always kept.
pub fn apply_missingness(record: &UnitRecord, rate: f64, seed: u64) -> Result<UnitRecord> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("missing rate {rate} outside [0, 1)")));
    }
    let m = record.len();
    let remove = removed_count(m, rate);
    if remove == 0 {
        return Ok(record.clone());
    }
    if m < 2 || m - remove < MIN_OBSERVATIONS || remove > m - 2 {
        return Err(Error::contract(format!(
            "removing {remove} of {m} points leaves fewer than {MIN_OBSERVATIONS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[record.unit_id as u64]));
    let mut drop = vec![false; m];
    for i in sample(&mut rng, m - 2, remove) {
        drop[i + 1] = true;
    }
    let keep: Vec<usize> = (0..m).filter(|&i| !drop[i]).collect();
    Ok(UnitRecord {
        unit_id: record.unit_id,
        timestamps: keep.iter().map(|&i| record.timestamps[i]).collect(),
        x: record.x.select_rows(&keep)?,
        a: record.a.select_rows(&keep)?,
        y: keep.iter().map(|&i| record.y[i]).collect(),
        z_true: record.z_true.select_rows(&keep)?,
        cf_plans: record
            .cf_plans
            .iter()
            .map(|p| {
                Ok(CounterfactualPlan {
                    name: p.name.clone(),
                    treatments: p.treatments.select_rows(&keep)?,
                })
            })
            .collect::<Result<_>>()?,
        y_cf: record.y_cf.iter().map(|y| keep.iter().map(|&i| y[i]).collect()).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SimConfig,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub units: Vec<UnitRecord>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self, idx: &[usize]) -> Vec<&UnitRecord> {
        idx.iter().map(|&i| &self.units[i]).collect()
    }

    pub fn train(&self) -> Vec<&UnitRecord> {
        self.split(&self.manifest.splits.train)
    }

    pub fn val(&self) -> Vec<&UnitRecord> {
        self.split(&self.manifest.splits.val)
    }

    pub fn test(&self) -> Vec<&UnitRecord> {
        self.split(&self.manifest.splits.test)
    }
}

/// 80/10/10 partition of `0..n` after a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let missing_seed = derive_seed(cfg.seed, &[TAG_MISSING]);
    let units = (0..cfg.n_units)
        .map(|i| {
            let rec = simulate_unit_with_plans(cfg, derive_seed(cfg.seed, &[TAG_UNIT, i as u64]), i, None)?;
            apply_missingness(&rec, cfg.missing_rate, missing_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        units,
        manifest: Manifest {
            format: DATASET_FORMAT.into(),
            config: cfg.clone(),
            splits: split_indices(cfg.n_units, derive_seed(cfg.seed, &[TAG_SPLIT])),
        },
    })
}

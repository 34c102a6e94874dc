//! The assembled estimator: confounder branch, latent SCDE and outcome
//! decoder sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::confounder::{band_windows, BandWindows, BranchShape, ConfounderBranch};
use crate::error::{Error, Result};
use crate::fourier::DEFAULT_SIGMA_F;
use crate::latent::{factor_loss, BoundField, FieldRank, InitialState, LatentModel, LatentShape};
use crate::outcome::{outcome_loss, propensity_from_logits, OutcomeModel, WeightClip};
use crate::path::{build_control_path, solve_scde, solver_grid, BrownianDriver, ControlledField};
use crate::rng::derive_seed;
use crate::sim::ObservedUnit;
use crate::tensor::Tensor;

/// Plan times must match a unit timestamp within this distance.
pub const TIME_MATCH_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub z_dim: usize,
    pub conv_channels: usize,
    pub kernel_width: usize,
    pub branch_hidden: usize,
    pub sigma_f: f64,
    pub brownian_dim: usize,
    pub diffusion_scale: f64,
    pub max_step: f64,
    pub stability_delta: f64,
    pub initial_state: InitialState,
    pub field_rank: FieldRank,
    /// `false` drops the confounder branch (substitutes fixed at zero).
    pub use_confounders: bool,
    pub eval_samples: usize,
    pub weight_clip: WeightClip,
    pub factor_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            z_dim: 2,
            conv_channels: 4,
            kernel_width: 3,
            branch_hidden: 8,
            sigma_f: DEFAULT_SIGMA_F,
            brownian_dim: 2,
            diffusion_scale: 0.1,
            max_step: 0.05,
            stability_delta: 0.01,
            initial_state: InitialState::Learned,
            field_rank: FieldRank::RankOne,
            use_confounders: true,
            eval_samples: 10,
            weight_clip: WeightClip::default(),
            factor_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_dim,
            self.z_dim,
            self.conv_channels,
            self.kernel_width,
            self.branch_hidden,
            self.brownian_dim,
            self.eval_samples,
        ];
        if dims.contains(&0) {
            return Err(Error::contract("model dimensions and sample count must be positive"));
        }
        if !(self.max_step > 0.0) || !(self.sigma_f > 0.0) {
            return Err(Error::contract("max_step and sigma_f must be positive"));
        }
        if !(self.diffusion_scale >= 0.0) || !(self.stability_delta >= 0.0) || !(self.factor_weight >= 0.0) {
            return Err(Error::contract("diffusion scale, delta and factor weight must be nonnegative"));
        }
        let c = self.weight_clip;
        if !(c.low > 0.0 && c.low <= c.high) {
            return Err(Error::contract("weight clip must satisfy 0 < low <= high"));
        }
        Ok(())
    }
}

/// Treatments to apply at some of a unit's observation times. Times not
/// listed keep the factual treatment.
#[derive(Clone, Debug, PartialEq)]
pub struct TreatmentPlan {
    pub times: Vec<f64>,
    pub treatments: Tensor,
}

impl TreatmentPlan {
    pub fn new(times: Vec<f64>, treatments: Tensor) -> Result<Self> {
        if times.len() != treatments.rows() {
            return Err(Error::contract("plan needs one treatment row per time"));
        }
        Ok(Self { times, treatments })
    }

    /// Full `m x j` treatment matrix on `unit`'s timestamps.
    pub fn resolve(&self, unit: &PreparedUnit) -> Result<Tensor> {
        if self.treatments.cols() != unit.treatments.cols() {
            return Err(Error::contract("plan width differs from treatment count"));
        }
        let mut out = unit.treatments.clone();
        for (r, &t) in self.times.iter().enumerate() {
            let k = unit
                .times
                .iter()
                .position(|&s| (s - t).abs() <= TIME_MATCH_TOL)
                .ok_or_else(|| Error::contract(format!("plan time {t} is not a unit timestamp")))?;
            out.row_mut(k).copy_from_slice(self.treatments.row(r));
        }
        Ok(out)
    }
}

/// Data-only quantities of one unit, computed once and reused every step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUnit {
    pub unit_id: usize,
    pub times: Vec<f64>,
    pub grid: Vec<f64>,
    pub obs_idx: Vec<usize>,
    /// Per grid point: `[t, x, a_lag]`.
    pub inputs: Vec<Vec<f64>>,
    pub windows: Option<BandWindows>,
    pub treatments: Tensor,
    pub outcomes: Vec<f64>,
    pub gaps: Vec<f64>,
}

impl PreparedUnit {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Outcomes the decoder is trained on (all but the first).
    pub fn targets(&self) -> &[f64] {
        &self.outcomes[1..]
    }
}

/// Graph handles of one unit's forward pass.
pub struct UnitForward {
    /// Latent state at each observation time.
    pub latents: Vec<Var>,
    /// Confounder substitute per solver grid point.
    pub confounders: Vec<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub covariate_dim: usize,
    pub treatment_dim: usize,
    pub store: ParamStore,
    pub latent: LatentModel,
    pub outcome: OutcomeModel,
    pub branch: Option<ConfounderBranch>,
    /// Population frequency of each treatment bit, the weight numerator.
    pub marginal: Vec<f64>,
    /// Feeds zero substitutes even when a branch exists.
    #[serde(default)]
    pub zero_confounders: bool,
}

impl Model {
    /// Branch parameters are created last, so models that differ only in
    /// `use_confounders` share every other parameter for a given seed.
    pub fn new(cfg: ModelConfig, covariate_dim: usize, treatment_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if covariate_dim == 0 || treatment_dim == 0 {
            return Err(Error::contract("covariate and treatment counts must be positive"));
        }
        let (d, j, l) = (covariate_dim, treatment_dim, cfg.latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let latent = LatentModel::new(
            &mut store,
            &mut rng,
            LatentShape {
                latent_dim: l,
                input_dim: d + j + cfg.z_dim,
                control_dim: 1 + d + j + cfg.z_dim,
                brownian_dim: cfg.brownian_dim,
                treatment_dim: j,
                field_rank: cfg.field_rank,
                initial_state: cfg.initial_state,
                diffusion_scale: cfg.diffusion_scale,
                stability_delta: cfg.stability_delta,
            },
        )?;
        let outcome = OutcomeModel::new(&mut store, &mut rng, l, j, l, cfg.max_step)?;
        let branch = if cfg.use_confounders {
            Some(ConfounderBranch::new(
                &mut store,
                &mut rng,
                BranchShape {
                    in_channels: d + j,
                    conv_channels: cfg.conv_channels,
                    kernel_width: cfg.kernel_width,
                    hidden: cfg.branch_hidden,
                    z_dim: cfg.z_dim,
                    sigma_f: cfg.sigma_f,
                },
            )?)
        } else {
            None
        };
        store.project();
        Ok(Self {
            cfg,
            covariate_dim,
            treatment_dim,
            store,
            latent,
            outcome,
            branch,
            marginal: vec![0.5; j],
            zero_confounders: false,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn uses_branch(&self) -> bool {
        self.branch.is_some() && !self.zero_confounders
    }

    /// Sets the weight numerator to the treatment frequencies of `units`.
    pub fn fit_marginal(&mut self, units: &[PreparedUnit]) -> Result<()> {
        let j = self.treatment_dim;
        let mut ones = vec![0.0; j];
        let mut rows = 0usize;
        for u in units {
            for k in 0..u.len() {
                for (c, o) in ones.iter_mut().enumerate() {
                    *o += u.treatments.get(k, c);
                }
            }
            rows += u.len();
        }
        if rows == 0 {
            return Err(Error::contract("no treatment rows to estimate the marginal"));
        }
        self.marginal = ones.into_iter().map(|o| o / rows as f64).collect();
        Ok(())
    }

    pub fn prepare(&self, unit: &ObservedUnit<'_>) -> Result<PreparedUnit> {
        let m = unit.len();
        let (d, j) = (self.covariate_dim, self.treatment_dim);
        if m < 2 {
            return Err(Error::contract("a unit needs at least two observations"));
        }
        if unit.x.cols() != d || unit.a.cols() != j {
            return Err(Error::contract(format!(
                "unit has {} covariates and {} treatments, model expects {d} and {j}",
                unit.x.cols(),
                unit.a.cols()
            )));
        }
        if unit.a.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("treatments must be binary"));
        }
        let mut values = Tensor::zeros(&[m, d + j]);
        for k in 0..m {
            let row = values.row_mut(k);
            row[..d].copy_from_slice(unit.x.row(k));
            if k > 0 {
                row[d..].copy_from_slice(unit.a.row(k - 1));
            }
        }
        let path = build_control_path(unit.timestamps, &values)?;
        let (grid, obs_idx) = solver_grid(unit.timestamps, self.cfg.max_step)?;
        let mut inputs = Vec::with_capacity(grid.len());
        let mut history = Tensor::zeros(&[grid.len(), d + j]);
        for (n, &t) in grid.iter().enumerate() {
            // exact knot values at observation times
            let v = match obs_idx.binary_search(&n) {
                Ok(k) => values.row(k).to_vec(),
                Err(_) => path.eval(t)?,
            };
            history.row_mut(n).copy_from_slice(&v);
            let mut row = Vec::with_capacity(1 + d + j);
            row.push(t);
            row.extend_from_slice(&v);
            inputs.push(row);
        }
        let windows = match &self.branch {
            Some(b) => Some(band_windows(&history, b.shape.sigma_f, b.shape.kernel_width)?),
            None => None,
        };
        Ok(PreparedUnit {
            unit_id: unit.unit_id,
            times: unit.timestamps.to_vec(),
            grid,
            obs_idx,
            inputs,
            windows,
            treatments: unit.a.clone(),
            outcomes: unit.y.to_vec(),
            gaps: unit.timestamps.windows(2).map(|w| w[1] - w[0]).collect(),
        })
    }

    /// Copies every parameter onto the tape; index `i` holds `ParamId(i)`.
    pub fn param_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.store.ids().map(|id| g.param(&self.store, id)).collect()
    }

    /// Solves the latent SCDE for one unit. `stochastic = false` (or a zero
    /// diffusion scale) skips the noise term.
    pub fn forward_unit(
        &self,
        g: &mut Graph,
        params: &[Var],
        unit: &PreparedUnit,
        seed: u64,
        stochastic: bool,
    ) -> Result<UnitForward> {
        let z_dim = self.cfg.z_dim;
        let confounders: Vec<Var> = match (&self.branch, &unit.windows) {
            (Some(b), Some(w)) if self.uses_branch() => b.infer_graph(g, params, w),
            (Some(_), None) if self.uses_branch() => {
                return Err(Error::contract("unit was prepared without band windows"));
            }
            _ => (0..unit.grid.len()).map(|_| g.zeros(z_dim)).collect(),
        };
        let mut control = Vec::with_capacity(unit.grid.len());
        let mut embedded = Vec::with_capacity(unit.grid.len());
        let mut first_input = None;
        for (row, &z) in unit.inputs.iter().zip(&confounders) {
            let time = g.constant(&row[..1]);
            let obs = g.constant(&row[1..]);
            let input = g.concat(&[obs, z]);
            control.push(g.concat(&[time, input]));
            embedded.push(self.latent.embed(g, params, input));
            first_input.get_or_insert(input);
        }
        let u0 = self.latent.initial_state(g, params, first_input.expect("non-empty grid"));
        let a_drift = self.latent.stable_matrix(g, params, &self.latent.drift);
        let mut drift = BoundField {
            model: &self.latent,
            params,
            a: a_drift,
            diffusion: false,
            embedded: &embedded,
        };
        let noisy = stochastic && !self.latent.is_deterministic();
        let mut diff_field = if noisy {
            let a_diff = self.latent.stable_matrix(g, params, &self.latent.diffusion);
            Some(BoundField {
                model: &self.latent,
                params,
                a: a_diff,
                diffusion: true,
                embedded: &embedded,
            })
        } else {
            None
        };
        let brownian = BrownianDriver::new(seed, self.cfg.brownian_dim);
        let states = solve_scde(
            g,
            &mut drift,
            diff_field.as_mut().map(|f| f as &mut dyn ControlledField),
            u0,
            &control,
            &brownian,
            &unit.grid,
        )?;
        Ok(UnitForward {
            latents: unit.obs_idx.iter().map(|&i| states[i]).collect(),
            confounders,
        })
    }

    /// One-step-ahead outcome predictions for `y_1 .. y_{m-1}` under a full
    /// `m x j` treatment matrix.
    pub fn decode(&self, g: &mut Graph, params: &[Var], unit: &PreparedUnit, latents: &[Var], plan: &Tensor) -> Result<Vec<Var>> {
        let m = unit.len();
        if plan.rows() != m || latents.len() != m {
            return Err(Error::contract(format!(
                "plan has {} rows for a unit with {m} observations",
                plan.rows()
            )));
        }
        let rows: Vec<&[f64]> = (0..m - 1).map(|k| plan.row(k)).collect();
        self.outcome.decode(g, params, &latents[..m - 1], &rows, &unit.gaps)
    }

    /// Training objective over a batch: `factor_weight · factor + outcome`.
    /// `seeds[i]` drives the Brownian path of `units[i]`.
    pub fn batch_loss(&self, g: &mut Graph, params: &[Var], units: &[&PreparedUnit], seeds: &[u64]) -> Result<BatchLoss> {
        if units.is_empty() || units.len() != seeds.len() {
            return Err(Error::contract("batch needs one seed per unit"));
        }
        let j = self.treatment_dim;
        let mut logits = Vec::new();
        let mut targets: Vec<&[f64]> = Vec::new();
        let mut preds = Vec::new();
        let mut y = Vec::new();
        let mut weights = Vec::new();
        for (unit, &seed) in units.iter().zip(seeds) {
            let m = unit.len();
            let fwd = self.forward_unit(g, params, unit, seed, true)?;
            let mut logit_vals = Vec::with_capacity((m - 1) * j);
            for k in 0..m - 1 {
                let l = self.latent.treatment_logits(g, params, fwd.latents[k]);
                logit_vals.extend_from_slice(g.value(l));
                logits.push(l);
                targets.push(unit.treatments.row(k + 1));
            }
            let logit_t = Tensor::matrix(m - 1, j, logit_vals)?;
            let prop = propensity_from_logits(&logit_t, &unit.treatments, &self.marginal, self.cfg.weight_clip)?;
            weights.extend_from_slice(&prop.stabilized_weights[..m - 1]);
            preds.extend(self.decode(g, params, unit, &fwd.latents, &unit.treatments)?);
            y.extend_from_slice(unit.targets());
        }
        let factor = factor_loss(g, &logits, &targets)?;
        let pred = g.concat(&preds);
        let outcome = outcome_loss(g, pred, &y, &weights)?;
        let scaled = g.scale(factor, self.cfg.factor_weight);
        let total = g.add(scaled, outcome);
        Ok(BatchLoss {
            total,
            factor: g.scalar_value(factor),
            outcome: g.scalar_value(outcome),
        })
    }

    fn sample_seeds(&self, unit: &PreparedUnit, seed: u64) -> Vec<u64> {
        let n = if self.latent.is_deterministic() {
            1
        } else {
            self.cfg.eval_samples
        };
        (0..n as u64).map(|s| derive_seed(seed, &[unit.unit_id as u64, s])).collect()
    }

    /// Averaged one-step-ahead predictions under each full treatment matrix
    /// in `plans`, all decoded from the same factual latent samples.
    pub fn predict_matrices(&self, unit: &PreparedUnit, plans: &[Tensor], seed: u64) -> Result<Vec<Vec<f64>>> {
        let seeds = self.sample_seeds(unit, seed);
        let mut sums = vec![vec![0.0; unit.len() - 1]; plans.len()];
        let mut g = Graph::new();
        for &s in &seeds {
            g.clear();
            let params = self.param_vars(&mut g);
            let fwd = self.forward_unit(&mut g, &params, unit, s, true)?;
            for (plan, sum) in plans.iter().zip(&mut sums) {
                let out = self.decode(&mut g, &params, unit, &fwd.latents, plan)?;
                for (acc, v) in sum.iter_mut().zip(out) {
                    *acc += g.scalar_value(v);
                }
            }
        }
        let n = seeds.len() as f64;
        for sum in &mut sums {
            for v in sum.iter_mut() {
                *v /= n;
            }
        }
        if sums.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical("predict", "non-finite prediction"));
        }
        Ok(sums)
    }

    /// Factual one-step-ahead predictions of `y_1 .. y_{m-1}`.
    pub fn predict(&self, unit: &PreparedUnit, seed: u64) -> Result<Vec<f64>> {
        Ok(self.predict_matrices(unit, std::slice::from_ref(&unit.treatments), seed)?.remove(0))
    }

    /// Expected final outcome under `plan`.
    pub fn predict_counterfactual(&self, unit: &PreparedUnit, plan: &TreatmentPlan, seed: u64) -> Result<f64> {
        let full = plan.resolve(unit)?;
        let out = self.predict_matrices(unit, &[full], seed)?;
        Ok(*out[0].last().expect("m >= 2"))
    }

    /// Predicted final outcome under `plan` minus the factual prediction.
    pub fn ite(&self, unit: &PreparedUnit, plan: &TreatmentPlan, seed: u64) -> Result<f64> {
        let full = plan.resolve(unit)?;
        let out = self.predict_matrices(unit, &[full, unit.treatments.clone()], seed)?;
        Ok(out[0].last().expect("m >= 2") - out[1].last().expect("m >= 2"))
    }

    /// Mean of [`Model::ite`] with `plans[i]` applied to `units[i]`.
    pub fn ate(&self, units: &[PreparedUnit], plans: &[TreatmentPlan], seed: u64) -> Result<f64> {
        if units.len() != plans.len() {
            return Err(Error::contract("ate needs one plan per unit"));
        }
        let ites = units
            .iter()
            .zip(plans)
            .map(|(u, p)| self.ite(u, p, seed))
            .collect::<Result<Vec<_>>>()?;
        mean_effect(&ites)
    }

    /// Mean batch objective over `units` without the noise term.
    pub fn validation_loss(&self, units: &[PreparedUnit]) -> Result<f64> {
        if units.is_empty() {
            return Err(Error::contract("no validation units"));
        }
        let mut g = Graph::new();
        let params = self.param_vars(&mut g);
        let refs: Vec<&PreparedUnit> = units.iter().collect();
        let seeds = vec![0; refs.len()];
        let loss = self.batch_loss_deterministic(&mut g, &params, &refs, &seeds)?;
        Ok(g.scalar_value(loss.total))
    }

    fn batch_loss_deterministic(&self, g: &mut Graph, params: &[Var], units: &[&PreparedUnit], seeds: &[u64]) -> Result<BatchLoss> {
        let mut quiet = self.clone();
        quiet.latent.shape.diffusion_scale = 0.0;
        quiet.batch_loss(g, params, units, seeds)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub factor: f64,
    pub outcome: f64,
}

/// Mean of individual effects.
pub fn mean_effect(ites: &[f64]) -> Result<f64> {
    if ites.is_empty() {
        return Err(Error::contract("average effect over an empty population"));
    }
    Ok(ites.iter().sum::<f64>() / ites.len() as f64)
}

//! Latent factor model: embedding, Lipschitz-RNN vector fields, and the
//! one-step-ahead treatment head.
//!
//! Drift and diffusion share the form
//!
//! ```text
//! v(u, e) = A u + tanh(W u + U e + b),   A = M - Mᵀ - δI
//! ```
//!
//! with `‖W‖₂, ‖U‖₂ ≤ 1`. The skew-symmetric reparameterisation keeps the
//! symmetric part of `A` at `-δI`. The `l x c` field is `v wᵀ` (rank one) or
//! `v ∘ Wc` row-wise (full), contracted with the control increment.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::path::ControlledField;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRank {
    RankOne,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Linear map of the first observation.
    Learned,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentShape {
    pub latent_dim: usize,
    /// Embedding input width: covariates + lagged treatments + confounders.
    pub input_dim: usize,
    /// Control channels (time + embedding inputs).
    pub control_dim: usize,
    pub brownian_dim: usize,
    pub treatment_dim: usize,
    pub field_rank: FieldRank,
    pub initial_state: InitialState,
    pub diffusion_scale: f64,
    pub stability_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub m: ParamId,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    /// `c` weights (rank one) or `l x c` (full).
    pub channels: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub shape: LatentShape,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub init: Option<(ParamId, ParamId)>,
    pub drift: FieldParams,
    pub diffusion: FieldParams,
    pub treat_w: ParamId,
    pub treat_b: ParamId,
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl LatentModel {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, shape: LatentShape) -> Result<Self> {
        let (l, n_in, c) = (shape.latent_dim, shape.input_dim, shape.control_dim);
        if l == 0 || n_in == 0 || c == 0 || shape.treatment_dim == 0 || shape.brownian_dim == 0 {
            return Err(Error::contract("latent model dimensions must be positive"));
        }
        if !(shape.diffusion_scale >= 0.0) || !(shape.stability_delta >= 0.0) {
            return Err(Error::contract("diffusion scale and stability delta must be nonnegative"));
        }
        let embed_w = store.add("latent.embed_w", normal(rng, &[l, n_in], 1.0 / (n_in as f64).sqrt()), None);
        let embed_b = store.add("latent.embed_b", Tensor::zeros(&[l]), None);
        let init = match shape.initial_state {
            InitialState::Learned => Some((
                store.add("latent.init_w", normal(rng, &[l, n_in], 0.5 / (n_in as f64).sqrt()), None),
                store.add("latent.init_b", Tensor::zeros(&[l]), None),
            )),
            InitialState::Zeros => None,
        };
        let mut field = |prefix: &str, width: usize| {
            let channels = match shape.field_rank {
                FieldRank::RankOne => normal(rng, &[width], 1.0 / (width as f64).sqrt()),
                FieldRank::Full => normal(rng, &[l, width], 1.0 / (width as f64).sqrt()),
            };
            FieldParams {
                m: store.add(&format!("{prefix}.m"), normal(rng, &[l, l], 0.1 / (l as f64).sqrt()), None),
                w: store.add(&format!("{prefix}.w"), normal(rng, &[l, l], 1.0 / (l as f64).sqrt()), Some(1.0)),
                u: store.add(&format!("{prefix}.u"), normal(rng, &[l, l], 1.0 / (l as f64).sqrt()), Some(1.0)),
                b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[l]), None),
                channels: store.add(&format!("{prefix}.channels"), channels, None),
            }
        };
        let drift = field("latent.drift", c);
        let diffusion = field("latent.diffusion", shape.brownian_dim);
        let j = shape.treatment_dim;
        let treat_w = store.add("latent.treat_w", normal(rng, &[j, l], 1.0 / (l as f64).sqrt()), None);
        let treat_b = store.add("latent.treat_b", Tensor::zeros(&[j]), None);
        Ok(Self {
            shape,
            embed_w,
            embed_b,
            init,
            drift,
            diffusion,
            treat_w,
            treat_b,
        })
    }

    /// `A = M - Mᵀ - δI` for a field's `M`.
    pub fn stable_matrix(&self, g: &mut Graph, params: &[Var], field: &FieldParams) -> Var {
        let l = self.shape.latent_dim;
        let m = params[field.m.0];
        let mt = g.transpose(m, l);
        let skew = g.sub(m, mt);
        let delta = g.constant(&Tensor::identity(l).scale(self.shape.stability_delta).into_data());
        g.sub(skew, delta)
    }

    /// `tanh(W_e · input + b_e)`.
    pub fn embed(&self, g: &mut Graph, params: &[Var], input: Var) -> Var {
        let pre = g.affine(params[self.embed_w.0], input, params[self.embed_b.0]);
        g.tanh(pre)
    }

    pub fn initial_state(&self, g: &mut Graph, params: &[Var], first_input: Var) -> Var {
        match self.init {
            Some((w, b)) => g.affine(params[w.0], first_input, params[b.0]),
            None => g.zeros(self.shape.latent_dim),
        }
    }

    /// `A u + tanh(W u + U e + b)`.
    pub fn field_vector(&self, g: &mut Graph, params: &[Var], a: Var, field: &FieldParams, u: Var, e: Var) -> Var {
        let lin = g.matvec(a, u);
        let wu = g.matvec(params[field.w.0], u);
        let ue = g.affine(params[field.u.0], e, params[field.b.0]);
        let pre = g.add(wu, ue);
        let act = g.tanh(pre);
        g.add(lin, act)
    }

    /// Full `l x width` matrix of a field.
    fn field_matrix(&self, g: &mut Graph, params: &[Var], field: &FieldParams, v: Var) -> Var {
        let ch = params[field.channels.0];
        match self.shape.field_rank {
            FieldRank::RankOne => g.outer(v, ch),
            FieldRank::Full => {
                let width = g.len_of(ch) / self.shape.latent_dim;
                let ones = g.constant(&vec![1.0; width]);
                let spread = g.outer(v, ones);
                g.mul(spread, ch)
            }
        }
    }

    /// Field contracted with an increment, without forming the matrix.
    fn field_apply(&self, g: &mut Graph, params: &[Var], field: &FieldParams, v: Var, increment: Var) -> Var {
        let ch = params[field.channels.0];
        match self.shape.field_rank {
            FieldRank::RankOne => {
                let s = g.dot(ch, increment);
                g.scale_by(v, s)
            }
            FieldRank::Full => {
                let proj = g.matvec(ch, increment);
                g.mul(v, proj)
            }
        }
    }

    /// Drift field `f(u, e)` as a row-major `l x c` matrix.
    pub fn drift_field(&self, g: &mut Graph, params: &[Var], a_drift: Var, u: Var, e: Var) -> Var {
        let v = self.field_vector(g, params, a_drift, &self.drift, u, e);
        self.field_matrix(g, params, &self.drift, v)
    }

    /// Diffusion field `g(u, e)` as a row-major `l x w` matrix, scaled by
    /// the diffusion scale.
    pub fn diffusion_field(&self, g: &mut Graph, params: &[Var], a_diff: Var, u: Var, e: Var) -> Var {
        let v = self.field_vector(g, params, a_diff, &self.diffusion, u, e);
        let m = self.field_matrix(g, params, &self.diffusion, v);
        g.scale(m, self.shape.diffusion_scale)
    }

    /// Treatment logits for the next observation.
    pub fn treatment_logits(&self, g: &mut Graph, params: &[Var], u: Var) -> Var {
        g.affine(params[self.treat_w.0], u, params[self.treat_b.0])
    }

    pub fn is_deterministic(&self) -> bool {
        self.shape.diffusion_scale == 0.0
    }
}

/// Drift or diffusion bound to one unit's embedded observations.
pub struct BoundField<'a> {
    pub model: &'a LatentModel,
    pub params: &'a [Var],
    pub a: Var,
    pub diffusion: bool,
    /// Embedded observation per grid point.
    pub embedded: &'a [Var],
}

impl ControlledField for BoundField<'_> {
    fn apply(&mut self, g: &mut Graph, u: Var, step: usize, _t: f64, increment: Var) -> Var {
        let field = if self.diffusion {
            &self.model.diffusion
        } else {
            &self.model.drift
        };
        let v = self.model.field_vector(g, self.params, self.a, field, u, self.embedded[step]);
        let out = self.model.field_apply(g, self.params, field, v, increment);
        if self.diffusion {
            g.scale(out, self.model.shape.diffusion_scale)
        } else {
            out
        }
    }
}

/// Mean binary cross-entropy of `logits` against 0/1 `targets` (one entry
/// per treatment bit), as a graph scalar.
pub fn factor_loss(g: &mut Graph, logits: &[Var], targets: &[&[f64]]) -> Result<Var> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::contract("factor loss needs one target row per logit vector"));
    }
    let mut bits = 0usize;
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(targets) {
        if t.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("treatments must be binary"));
        }
        if g.len_of(l) != t.len() {
            return Err(Error::contract("logit and treatment widths differ"));
        }
        bits += t.len();
        terms.push(g.bce_logits(l, t));
    }
    let all = g.concat(&terms);
    let total = g.sum(all);
    Ok(g.scale(total, 1.0 / bits as f64))
}

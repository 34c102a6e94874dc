//! Outcome model: stabilized inverse-propensity weights and a two-layer
//! gated recurrent decoder stepped at observation times.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GruWeights, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are kept inside `(PROB_FLOOR, 1 - PROB_FLOOR)`.
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightClip {
    pub low: f64,
    pub high: f64,
}

impl Default for WeightClip {
    fn default() -> Self {
        Self { low: 0.1, high: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropensityRecord {
    /// `(k, c)`: modelled probability of the factual treatment bit `c` at
    /// step `k`. Row 0 uses the marginal (no history to condition on).
    pub probs: Tensor,
    /// Cumulative stabilized weight per step before clipping.
    pub raw_weights: Vec<f64>,
    pub stabilized_weights: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stabilized weights `sw_k = ∏_{s=1..k} ∏_c p_c(a_s) / p(a_s^c | û_{s-1})`.
///
/// `logits` row `s` predicts the treatments at step `s + 1`; it needs at
/// least `m - 1` rows for `m` treatment rows. `marginal[c]` is the
/// population frequency of `a^c = 1`.
pub fn propensity_from_logits(
    logits: &Tensor,
    treatments: &Tensor,
    marginal: &[f64],
    clip: WeightClip,
) -> Result<PropensityRecord> {
    let (m, j) = (treatments.rows(), treatments.cols());
    if m == 0 || treatments.is_empty() {
        return Err(Error::contract("empty treatment path"));
    }
    if marginal.len() != j || (m > 1 && (logits.rows() < m - 1 || logits.cols() != j)) {
        return Err(Error::contract("logit, marginal and treatment widths differ"));
    }
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let mut probs = Tensor::zeros(&[m, j]);
    let mut raw = Vec::with_capacity(m);
    let mut acc = 1.0;
    for k in 0..m {
        for c in 0..j {
            let a = treatments.get(k, c);
            let pm = clamp(marginal[c]);
            let num = if a == 1.0 { pm } else { 1.0 - pm };
            let den = if k == 0 {
                num
            } else {
                let p1 = clamp(sigmoid(logits.get(k - 1, c)));
                if a == 1.0 {
                    p1
                } else {
                    1.0 - p1
                }
            };
            probs.set(k, c, den);
            if k > 0 {
                acc *= num / den;
            }
        }
        raw.push(acc);
    }
    let stabilized_weights = raw.iter().map(|w| w.clamp(clip.low, clip.high)).collect();
    Ok(PropensityRecord {
        probs,
        raw_weights: raw,
        stabilized_weights,
    })
}

/// `Σ w (ŷ - y)² / Σ w` on plain values.
pub fn outcome_loss_value(preds: &[f64], targets: &[f64], weights: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != weights.len() {
        return Err(Error::contract("outcome loss inputs must align"));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::contract("outcome weights sum to zero"));
    }
    let num: f64 = preds
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, y), w)| w * (p - y) * (p - y))
        .sum();
    Ok(num / wsum)
}

/// Graph version of [`outcome_loss_value`]; weights are constants.
pub fn outcome_loss(g: &mut Graph, preds: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    if g.len_of(preds) != targets.len() || targets.len() != weights.len() {
        return Err(Error::contract("outcome loss inputs must align"));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::contract("outcome weights sum to zero"));
    }
    let sse = g.weighted_sse(preds, targets, weights);
    Ok(g.scale(sse, 1.0 / wsum))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Update gate over `[x; h]`.
    pub wz: ParamId,
    pub bz: ParamId,
    /// Reset gate over `[x; h]`.
    pub wr: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub bn: ParamId,
    pub un: ParamId,
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let (n, h) = (input_dim, hidden_dim);
        let s_cat = 1.0 / ((n + h) as f64).sqrt();
        let s_in = 1.0 / (n as f64).sqrt();
        let s_h = 1.0 / (h as f64).sqrt();
        Self {
            input_dim,
            hidden_dim,
            wz: store.add(&format!("{name}.wz"), normal(rng, &[h, n + h], s_cat), None),
            bz: store.add(&format!("{name}.bz"), Tensor::zeros(&[h]), None),
            wr: store.add(&format!("{name}.wr"), normal(rng, &[h, n + h], s_cat), None),
            br: store.add(&format!("{name}.br"), Tensor::zeros(&[h]), None),
            wn: store.add(&format!("{name}.wn"), normal(rng, &[h, n], s_in), None),
            bn: store.add(&format!("{name}.bn"), Tensor::zeros(&[h]), None),
            un: store.add(&format!("{name}.un"), normal(rng, &[h, h], s_h), None),
        }
    }

    pub fn weights(&self, params: &[Var]) -> GruWeights {
        GruWeights {
            wz: params[self.wz.0],
            bz: params[self.bz.0],
            wr: params[self.wr.0],
            br: params[self.br.0],
            wn: params[self.wn.0],
            bn: params[self.bn.0],
            un: params[self.un.0],
        }
    }

    /// `h' = n + z ∘ (h - n)` with `n = tanh(W_n x + b_n + r ∘ (U_n h))`.
    pub fn step(&self, g: &mut Graph, params: &[Var], x: Var, h: Var) -> Var {
        g.gru(x, h, &self.weights(params))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub latent_dim: usize,
    pub treatment_dim: usize,
    pub hidden_dim: usize,
    /// Gaps are divided by this before entering the decoder.
    pub time_scale: f64,
    pub lower: GruCell,
    pub upper: GruCell,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl OutcomeModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        latent_dim: usize,
        treatment_dim: usize,
        hidden_dim: usize,
        time_scale: f64,
    ) -> Result<Self> {
        if latent_dim == 0 || treatment_dim == 0 || hidden_dim == 0 || !(time_scale > 0.0) {
            return Err(Error::contract("outcome model dimensions must be positive"));
        }
        let n_in = latent_dim + treatment_dim + 1;
        let lower = GruCell::new(store, rng, "outcome.lower", n_in, hidden_dim);
        let upper = GruCell::new(store, rng, "outcome.upper", hidden_dim, hidden_dim);
        let head_w = store.add(
            "outcome.head_w",
            normal(rng, &[1, hidden_dim], 1.0 / (hidden_dim as f64).sqrt()),
            None,
        );
        let head_b = store.add("outcome.head_b", Tensor::zeros(&[1]), None);
        Ok(Self {
            latent_dim,
            treatment_dim,
            hidden_dim,
            time_scale,
            lower,
            upper,
            head_w,
            head_b,
        })
    }

    /// One-step-ahead predictions: step `k` consumes `[û_k, a_k, Δt_k]` and
    /// emits the outcome at `t_k + Δt_k`. Returns one scalar var per step.
    pub fn decode(&self, g: &mut Graph, params: &[Var], latents: &[Var], plan: &[&[f64]], gaps: &[f64]) -> Result<Vec<Var>> {
        if latents.is_empty() {
            return Err(Error::contract("decode needs at least one step"));
        }
        if plan.len() != latents.len() || gaps.len() != latents.len() {
            return Err(Error::contract(format!(
                "plan has {} rows and {} gaps for {} latent states",
                plan.len(),
                gaps.len(),
                latents.len()
            )));
        }
        let mut h1 = g.zeros(self.hidden_dim);
        let mut h2 = g.zeros(self.hidden_dim);
        let mut out = Vec::with_capacity(latents.len());
        let mut side = Vec::with_capacity(self.treatment_dim + 1);
        for k in 0..latents.len() {
            if plan[k].len() != self.treatment_dim {
                return Err(Error::contract("plan row width differs from treatment count"));
            }
            side.clear();
            side.extend_from_slice(plan[k]);
            side.push(gaps[k] / self.time_scale);
            let s = g.constant(&side);
            let x = g.concat(&[latents[k], s]);
            h1 = self.lower.step(g, params, x, h1);
            h2 = self.upper.step(g, params, h1, h2);
            out.push(g.affine(params[self.head_w.0], h2, params[self.head_b.0]));
        }
        Ok(out)
    }
}

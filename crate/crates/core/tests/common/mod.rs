#![allow(dead_code)]

use lipscde::autodiff::{Graph, GruWeights, ParamId, ParamStore, Var};
use lipscde::latent::factor_loss;
use lipscde::model::{Model, ModelConfig, PreparedUnit};
use lipscde::outcome::{outcome_loss, propensity_from_logits};
use lipscde::sim::{simulate_unit, SimConfig, UnitRecord};
use lipscde::tensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between the tape gradient and central differences
/// of `Σ r ∘ op(inputs)` with respect to every input.
pub fn op_gradient_error(inputs: &[Vec<f64>], seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let build = |xs: &[Vec<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x)).collect();
        let out = op(&mut g, &vars);
        let r = random_vec(&mut rng(seed), g.len_of(out));
        let rv = g.constant(&r);
        let root = g.dot(out, rv);
        (g, vars, root)
    };
    let (g, vars, root) = build(inputs);
    let grads = g.gradients(root).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad_of(&grads, *v).to_vec();
        let numeric = numeric_gradient(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.to_vec();
                let (g, _, root) = build(&xs);
                g.scalar_value(root)
            },
            &inputs[i],
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Gradient error of every differentiable tape operation on random inputs.
pub fn all_op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut v = |n: usize| random_vec(&mut r, n);
    let (a3, b3, a5, m6, x3, b2, a2, s1) = (v(3), v(3), v(5), v(6), v(3), v(2), v(2), v(1));
    let logits = v(3).iter().map(|x| 3.0 * x).collect::<Vec<_>>();
    let gru_inputs = vec![v(2), v(3), v(15), v(3), v(15), v(3), v(6), v(3), v(9)];
    let gru = |g: &mut Graph, x: &[Var]| {
        let w = GruWeights {
            wz: x[2],
            bz: x[3],
            wr: x[4],
            br: x[5],
            wn: x[6],
            bn: x[7],
            un: x[8],
        };
        g.gru(x[0], x[1], &w)
    };
    vec![
        ("add", op_gradient_error(&[a3.clone(), b3.clone()], 1, |g, x| g.add(x[0], x[1]))),
        ("sub", op_gradient_error(&[a3.clone(), b3.clone()], 2, |g, x| g.sub(x[0], x[1]))),
        ("mul", op_gradient_error(&[a3.clone(), b3.clone()], 3, |g, x| g.mul(x[0], x[1]))),
        ("scale", op_gradient_error(&[a3.clone()], 4, |g, x| g.scale(x[0], -1.7))),
        ("scale_by", op_gradient_error(&[a3.clone(), s1], 5, |g, x| g.scale_by(x[0], x[1]))),
        ("matvec", op_gradient_error(&[m6.clone(), x3.clone()], 6, |g, x| g.matvec(x[0], x[1]))),
        (
            "affine",
            op_gradient_error(&[m6.clone(), x3.clone(), b2.clone()], 7, |g, x| g.affine(x[0], x[1], x[2])),
        ),
        ("outer", op_gradient_error(&[a2, b3.clone()], 8, |g, x| g.outer(x[0], x[1]))),
        ("transpose", op_gradient_error(&[m6], 9, |g, x| g.transpose(x[0], 2))),
        ("tanh", op_gradient_error(&[a5.clone()], 10, |g, x| g.tanh(x[0]))),
        ("sigmoid", op_gradient_error(&[a5.clone()], 11, |g, x| g.sigmoid(x[0]))),
        ("dot", op_gradient_error(&[a3.clone(), b3.clone()], 12, |g, x| g.dot(x[0], x[1]))),
        ("sum", op_gradient_error(&[a5.clone()], 13, |g, x| g.sum(x[0]))),
        ("mean", op_gradient_error(&[a5.clone()], 14, |g, x| g.mean(x[0]))),
        ("concat", op_gradient_error(&[a3.clone(), b2], 15, |g, x| g.concat(&[x[0], x[1]]))),
        ("slice", op_gradient_error(&[a5.clone()], 16, |g, x| g.slice(x[0], 1, 3))),
        (
            "bce_logits",
            op_gradient_error(&[logits], 17, |g, x| g.bce_logits(x[0], &[1.0, 0.0, 1.0])),
        ),
        (
            "weighted_sse",
            op_gradient_error(&[a3], 18, |g, x| g.weighted_sse(x[0], &[0.2, -0.4, 0.9], &[0.5, 2.0, 1.3])),
        ),
        ("gru", op_gradient_error(&gru_inputs, 19, gru)),
    ]
}

/// Largest relative error between backward gradients of `build` and central
/// differences, over every scalar of the parameters in `ids`.
pub fn param_gradient_error(store: &ParamStore, ids: &[ParamId], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let params: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect();
        let root = build(&mut g, &params);
        (g, root)
    };
    let mut with_grad = store.clone();
    with_grad.zero_grad();
    let (g, root) = eval(&with_grad);
    g.backward(root, &mut with_grad).expect("backward");
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = with_grad.grad(id).data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = work.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let (g, r) = eval(&work);
            let up = g.scalar_value(r);
            work.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let (g, r) = eval(&work);
            let down = g.scalar_value(r);
            work.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// `tanh(W₃ tanh(W₂ tanh(W₁ x + b₁) + b₂) + b₃)` summed, FD-checked on all weights.
pub fn three_layer_net_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut add = |name: &str, shape: &[usize]| {
        let n = shape.iter().product();
        store.add(name, Tensor::new(shape.to_vec(), random_vec(&mut r, n)).unwrap(), None)
    };
    let ids = [
        add("w1", &[4, 3]),
        add("b1", &[4]),
        add("w2", &[4, 4]),
        add("b2", &[4]),
        add("w3", &[2, 4]),
        add("b3", &[2]),
    ];
    let x = random_vec(&mut rng(seed + 1), 3);
    param_gradient_error(&store, &ids, |g, p| {
        let mut h = g.constant(&x);
        for layer in 0..3 {
            let pre = g.affine(p[2 * layer], h, p[2 * layer + 1]);
            h = g.tanh(pre);
        }
        g.sum(h)
    })
}

/// σ_max from nalgebra's SVD of `m` viewed as `rows x rest`.
pub fn svd_norm(m: &Tensor) -> f64 {
    let rows = m.shape()[0];
    let cols = m.len() / rows;
    let dm = DMatrix::from_row_slice(rows, cols, m.data());
    dm.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// `X_k = Σ_j x_j e^{-2πi jk/n}` by direct summation.
pub fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (j, &v) in x.iter().enumerate() {
            let angle = -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
            re[k] += v * angle.cos();
            im[k] += v * angle.sin();
        }
    }
    (re, im)
}

pub fn micro_sim(horizon: usize) -> SimConfig {
    SimConfig {
        n_units: 4,
        horizon,
        ..SimConfig::default()
    }
}

pub fn micro_units(cfg: &SimConfig, count: usize, seed: u64) -> Vec<UnitRecord> {
    (0..count).map(|i| simulate_unit(cfg, seed + i as u64).unwrap()).collect()
}

pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        ..ModelConfig::default()
    }
}

pub fn prepare_all(model: &Model, units: &[UnitRecord]) -> Vec<PreparedUnit> {
    units.iter().map(|u| model.prepare(&u.observed()).unwrap()).collect()
}

/// Parts of the training objective for `units` with externally supplied
/// propensity weights (`None` computes them from the current logits).
pub struct Objective {
    pub factor: Var,
    pub outcome: Var,
    pub total: Var,
    pub weights: Vec<f64>,
}

pub fn objective(
    model: &Model,
    g: &mut Graph,
    params: &[Var],
    units: &[PreparedUnit],
    seeds: &[u64],
    frozen: Option<&[f64]>,
) -> Objective {
    let j = model.treatment_dim;
    let mut logits = Vec::new();
    let mut targets: Vec<&[f64]> = Vec::new();
    let mut preds = Vec::new();
    let mut y = Vec::new();
    let mut weights = Vec::new();
    for (unit, &seed) in units.iter().zip(seeds) {
        let m = unit.len();
        let fwd = model.forward_unit(g, params, unit, seed, true).unwrap();
        let mut vals = Vec::new();
        for k in 0..m - 1 {
            let l = model.latent.treatment_logits(g, params, fwd.latents[k]);
            vals.extend_from_slice(g.value(l));
            logits.push(l);
            targets.push(unit.treatments.row(k + 1));
        }
        let lt = Tensor::matrix(m - 1, j, vals).unwrap();
        let prop = propensity_from_logits(&lt, &unit.treatments, &model.marginal, model.cfg.weight_clip).unwrap();
        weights.extend_from_slice(&prop.stabilized_weights[..m - 1]);
        preds.extend(model.decode(g, params, unit, &fwd.latents, &unit.treatments).unwrap());
        y.extend_from_slice(unit.targets());
    }
    let weights = frozen.map(|w| w.to_vec()).unwrap_or(weights);
    let factor = factor_loss(g, &logits, &targets).unwrap();
    let pred = g.concat(&preds);
    let outcome = outcome_loss(g, pred, &y, &weights).unwrap();
    let scaled = g.scale(factor, model.cfg.factor_weight);
    let total = g.add(scaled, outcome);
    Objective {
        factor,
        outcome,
        total,
        weights,
    }
}

/// Gradient errors of the factor loss and of the full objective (weights
/// held at their base values, as in training) for the 2-unit, 5-step,
/// latent-width-4 micro-model.
pub struct MicroGradient {
    pub factor_error: f64,
    pub total_error: f64,
    pub batch_loss_gap: f64,
    pub scalars: usize,
}

pub fn micro_model_gradients(seed: u64) -> MicroGradient {
    let sim = micro_sim(5);
    let records = micro_units(&sim, 2, seed);
    let mut model = Model::new(micro_model_config(), sim.covariate_dim, sim.treatment_dim, seed).unwrap();
    let units = prepare_all(&model, &records);
    model.fit_marginal(&units).unwrap();
    let seeds = [seed + 11, seed + 12];
    let ids: Vec<ParamId> = model.store.ids().collect();

    let mut g = Graph::new();
    let params = model.param_vars(&mut g);
    let base = objective(&model, &mut g, &params, &units, &seeds, None);
    let base_total = g.scalar_value(base.total);
    let mut g2 = Graph::new();
    let params2 = model.param_vars(&mut g2);
    let refs: Vec<&PreparedUnit> = units.iter().collect();
    let batch = model.batch_loss(&mut g2, &params2, &refs, &seeds).unwrap();
    let batch_loss_gap = (g2.scalar_value(batch.total) - base_total).abs();

    let factor_error = param_gradient_error(&model.store, &ids, |g, p| {
        objective(&model, g, p, &units, &seeds, None).factor
    });
    let frozen = base.weights.clone();
    let total_error = param_gradient_error(&model.store, &ids, |g, p| {
        objective(&model, g, p, &units, &seeds, Some(&frozen)).total
    });
    MicroGradient {
        factor_error,
        total_error,
        batch_loss_gap,
        scalars: model.num_parameters(),
    }
}

/// Euler–Maruyama on `du = -θ u dt + σ dW`, `u(0) = u0`, over `[0, 1]` with
/// `steps` uniform steps, one path per seed.
pub struct OuSample {
    pub mean: f64,
    pub std_error: f64,
    /// `u0 (1 - θ dt)^steps`, the exact mean of the discrete recursion.
    pub discrete_mean: f64,
    /// `u0 e^{-θ}`.
    pub continuous_mean: f64,
}

pub fn ou_sample(paths: usize, steps: usize, theta: f64, sigma: f64, u0: f64) -> OuSample {
    use lipscde::path::{solve_scde, BrownianDriver, MatrixField};
    let grid: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let mut finals = Vec::with_capacity(paths);
    let mut g = Graph::new();
    for seed in 0..paths as u64 {
        g.clear();
        let control: Vec<Var> = grid.iter().map(|&t| g.constant(&[t])).collect();
        let start = g.constant(&[u0]);
        let mut drift = MatrixField(|g: &mut Graph, u: Var, _: usize, _: f64| g.scale(u, -theta));
        let mut diff = MatrixField(|g: &mut Graph, _: Var, _: usize, _: f64| g.constant(&[sigma]));
        let states = solve_scde(
            &mut g,
            &mut drift,
            Some(&mut diff),
            start,
            &control,
            &BrownianDriver::new(seed, 1),
            &grid,
        )
        .unwrap();
        finals.push(g.value(*states.last().unwrap())[0]);
    }
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    OuSample {
        mean,
        std_error: (var / n).sqrt(),
        discrete_mean: u0 * (1.0 - theta / steps as f64).powi(steps as i32),
        continuous_mean: u0 * (-theta).exp(),
    }
}

/// `u' = A u` driven by `H(t) = t`, as a deterministic matrix field.
pub fn rotation_field(u: &[f64], _t: f64) -> Vec<f64> {
    vec![-0.5 * u[0] + u[1], -u[0] - 0.5 * u[1]]
}

/// A branch over `channels` inputs whose bounded parameters sit exactly at
/// spectral norm 1 (random weights scaled up, then projected).
pub fn saturated_branch(channels: usize, seed: u64) -> (ParamStore, lipscde::confounder::ConfounderBranch) {
    use lipscde::confounder::{BranchShape, ConfounderBranch};
    let mut store = ParamStore::new();
    let branch = ConfounderBranch::new(
        &mut store,
        &mut rng(seed),
        BranchShape {
            in_channels: channels,
            conv_channels: 4,
            kernel_width: 3,
            hidden: 8,
            z_dim: 2,
            sigma_f: lipscde::fourier::DEFAULT_SIGMA_F,
        },
    )
    .unwrap();
    for id in branch.param_ids() {
        let v = store.value(id).scale(10.0);
        store.get_mut(id).value = v;
    }
    store.project();
    (store, branch)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Largest `‖z_t(h) - z_t(h')‖ / ‖h_{≤t} - h'_{≤t}‖` over `pairs` random
/// history pairs and every time slice.
pub fn branch_lipschitz_ratio(pairs: usize, seed: u64) -> f64 {
    use lipscde::confounder::infer_confounders;
    let (t_len, c) = (24, 4);
    let (store, branch) = saturated_branch(c, seed);
    let mut r = rng(seed + 1);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let a = Tensor::matrix(t_len, c, random_vec(&mut r, t_len * c).iter().map(|v| 3.0 * v).collect()).unwrap();
        let mut b = a.clone();
        let scale = 10f64.powf(r.random_range(-3.0..0.5));
        for v in b.data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
        let za = infer_confounders(&a, &store, &branch).unwrap();
        let zb = infer_confounders(&b, &store, &branch).unwrap();
        for t in 0..t_len {
            let dz = l2(za.row(t), zb.row(t));
            let dh = l2(&a.data()[..(t + 1) * c], &b.data()[..(t + 1) * c]);
            if dh > 0.0 {
                worst = worst.max(dz / dh);
            }
        }
    }
    worst
}

fn residuals(y: &[f64], x: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    x.iter().zip(y).map(|(a, b)| b - my - slope * (a - mx)).collect()
}

/// Correlation of the mean treatment with the hidden confounder after
/// linearly removing the mean covariate, pooled over units and steps.
pub fn confounding_partial_corr(gamma: f64, n_units: usize, seed: u64) -> f64 {
    let cfg = SimConfig {
        gamma,
        n_units,
        seed,
        ..SimConfig::default()
    };
    let ds = lipscde::sim::generate_dataset(&cfg).unwrap();
    let (mut a, mut z, mut x) = (vec![], vec![], vec![]);
    for u in &ds.units {
        let obs = u.observed();
        for k in 0..u.len() {
            a.push(obs.a.row(k).iter().sum::<f64>() / obs.a.cols() as f64);
            x.push(obs.x.row(k).iter().sum::<f64>() / obs.x.cols() as f64);
            z.push(u.z_true().get(k, 0));
        }
    }
    let (ra, rz) = (residuals(&a, &x), residuals(&z, &x));
    let dot: f64 = ra.iter().zip(&rz).map(|(p, q)| p * q).sum();
    let na: f64 = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nz: f64 = rz.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nz)
}

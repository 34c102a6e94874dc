//! Control paths, Brownian drivers, and the Euler–Maruyama solver for
//!
//! ```text
//! u_t = u_{t0} + ∫ f(u_s, s) dH_s + ∫ g(u_s, s) dW_s
//! ```
//!
//! where `H` is a continuous interpolation of observed data and `W` is a
//! Brownian motion. The graph-based solver is differentiated by unrolling
//! the discrete recursion.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::counter_normal;
use crate::tensor::Tensor;

/// Piecewise-linear interpolation through `(knots[i], values.row(i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath {
    knots: Vec<f64>,
    values: Tensor,
}

pub fn build_control_path(timestamps: &[f64], values: &Tensor) -> Result<ControlPath> {
    if timestamps.len() < 2 {
        return Err(Error::contract("a control path needs at least two observations"));
    }
    if values.rows() != timestamps.len() || values.shape().len() != 2 {
        return Err(Error::contract(format!(
            "{} timestamps but values have shape {:?}",
            timestamps.len(),
            values.shape()
        )));
    }
    if timestamps.iter().any(|t| !t.is_finite()) || timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("timestamps must be finite and strictly increasing"));
    }
    Ok(ControlPath {
        knots: timestamps.to_vec(),
        values: values.clone(),
    })
}

impl ControlPath {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Index `i` of the segment `[t_i, t_{i+1}]` holding `t`; knots belong to
    /// the segment on their right except the final knot.
    fn segment(&self, t: f64) -> Result<usize> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::contract(format!(
                "t={t} outside [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let i = self.knots.partition_point(|&k| k <= t);
        Ok(i.saturating_sub(1).min(self.knots.len() - 2))
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let i = self.segment(t)?;
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        if t == t0 {
            return Ok(self.values.row(i).to_vec());
        }
        if t == t1 {
            return Ok(self.values.row(i + 1).to_vec());
        }
        let w = (t - t0) / (t1 - t0);
        Ok(self
            .values
            .row(i)
            .iter()
            .zip(self.values.row(i + 1))
            .map(|(a, b)| a + w * (b - a))
            .collect())
    }

    /// Slope of the active segment.
    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        let i = self.segment(t)?;
        let dt = self.knots[i + 1] - self.knots[i];
        Ok(self
            .values
            .row(i)
            .iter()
            .zip(self.values.row(i + 1))
            .map(|(a, b)| (b - a) / dt)
            .collect())
    }
}

/// Brownian motion whose increments are keyed on `(seed, step, dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrownianDriver {
    pub seed: u64,
    pub dim: usize,
}

impl BrownianDriver {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    /// Increment over grid step `step` of length `dt`: N(0, dt·I).
    pub fn increment(&self, step: usize, dt: f64) -> Vec<f64> {
        let s = dt.sqrt();
        (0..self.dim)
            .map(|d| s * counter_normal(self.seed, step as u64, d as u64))
            .collect()
    }
}

/// Latent states sampled on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    pub times: Vec<f64>,
    pub states: Tensor,
}

impl LatentPath {
    pub fn from_graph(g: &Graph, times: &[f64], states: &[Var]) -> Result<Self> {
        if states.is_empty() || times.len() != states.len() {
            return Err(Error::contract("latent path needs one state per time"));
        }
        let l = g.len_of(states[0]);
        let mut data = Vec::with_capacity(l * states.len());
        for &s in states {
            data.extend_from_slice(g.value(s));
        }
        Ok(Self {
            times: times.to_vec(),
            states: Tensor::matrix(states.len(), l, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.states.row(k)
    }
}

/// Union of the observation times with a uniform refinement of every gap so
/// no step exceeds `max_step`. Returns the grid and the grid index of each
/// observation.
pub fn solver_grid(obs_times: &[f64], max_step: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if obs_times.is_empty() {
        return Err(Error::contract("no observation times"));
    }
    if !(max_step > 0.0) {
        return Err(Error::contract("max_step must be positive"));
    }
    if obs_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("observation times must be strictly increasing"));
    }
    let mut grid = vec![obs_times[0]];
    let mut idx = vec![0];
    for w in obs_times.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = (((b - a) / max_step) - 1e-9).ceil().max(1.0) as usize;
        for i in 1..n {
            grid.push(a + (b - a) * i as f64 / n as f64);
        }
        grid.push(b);
        idx.push(grid.len() - 1);
    }
    Ok((grid, idx))
}

/// A vector field paired with a control increment: returns `F(u, t) · dX`.
pub trait ControlledField {
    fn apply(&mut self, g: &mut Graph, u: Var, step: usize, t: f64, increment: Var) -> Var;
}

/// Field given as a closure returning the full row-major `l x c` matrix.
pub struct MatrixField<F>(pub F);

impl<F> ControlledField for MatrixField<F>
where
    F: FnMut(&mut Graph, Var, usize, f64) -> Var,
{
    fn apply(&mut self, g: &mut Graph, u: Var, step: usize, t: f64, increment: Var) -> Var {
        let m = (self.0)(g, u, step, t);
        g.matvec(m, increment)
    }
}

/// Euler–Maruyama on `grid`:
/// `u_{n+1} = u_n + f(u_n, t_n)(H_{n+1} - H_n) + g(u_n, t_n) ΔW_n`.
///
/// `control[n]` is the path value at `grid[n]`. Returns one state per grid
/// point, `states[0] == u0`. A `None` diffusion skips the noise term.
pub fn solve_scde(
    g: &mut Graph,
    drift: &mut dyn ControlledField,
    diffusion: Option<&mut dyn ControlledField>,
    u0: Var,
    control: &[Var],
    brownian: &BrownianDriver,
    grid: &[f64],
) -> Result<Vec<Var>> {
    if grid.is_empty() || control.len() != grid.len() {
        return Err(Error::contract(format!(
            "control has {} points for a grid of {}",
            control.len(),
            grid.len()
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("solver grid must be strictly increasing"));
    }
    let mut diffusion = diffusion;
    let mut states = Vec::with_capacity(grid.len());
    states.push(u0);
    let mut u = u0;
    for n in 0..grid.len() - 1 {
        let t = grid[n];
        let dh = g.sub(control[n + 1], control[n]);
        let mut next = drift.apply(g, u, n, t, dh);
        if let Some(diff) = diffusion.as_deref_mut() {
            let dw = brownian.increment(n, grid[n + 1] - t);
            let dw = g.constant(&dw);
            let noise = diff.apply(g, u, n, t, dw);
            next = g.add(next, noise);
        }
        u = g.add(u, next);
        if g.value(u).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: n + 1 });
        }
        states.push(u);
    }
    Ok(states)
}

/// Deterministic controlled Euler on plain vectors. `field(u, t)` returns the
/// row-major `l x c` matrix.
pub fn solve_cde<F>(mut field: F, u0: &[f64], path: &ControlPath, grid: &[f64]) -> Result<LatentPath>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    let l = u0.len();
    let c = path.channels();
    let mut u = u0.to_vec();
    let mut data = u.clone();
    let mut h_prev = path.eval(grid[0])?;
    for n in 0..grid.len() - 1 {
        let h_next = path.eval(grid[n + 1])?;
        let m = field(&u, grid[n]);
        if m.len() != l * c {
            return Err(Error::contract(format!("field returned {} values, expected {}", m.len(), l * c)));
        }
        for i in 0..l {
            let mut acc = 0.0;
            for j in 0..c {
                acc += m[i * c + j] * (h_next[j] - h_prev[j]);
            }
            u[i] += acc;
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: n + 1 });
        }
        data.extend_from_slice(&u);
        h_prev = h_next;
    }
    Ok(LatentPath {
        times: grid.to_vec(),
        states: Tensor::matrix(grid.len(), l, data)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub dts: Vec<f64>,
    /// Max-abs error over the path's knots against the reference solve.
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln(error)` on `ln(dt)`; `None` when any error
    /// is zero.
    pub slope: Option<f64>,
}

/// Empirical convergence of the deterministic solver: each `dt` is compared
/// with a reference solve at `min(dt)/10`.
pub fn refine_convergence<F>(mut field: F, path: &ControlPath, u0: &[f64], dt_list: &[f64]) -> Result<ConvergenceReport>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    if dt_list.is_empty() {
        return Err(Error::contract("empty dt list"));
    }
    let finest = dt_list.iter().cloned().fold(f64::INFINITY, f64::min) / 10.0;
    let knot_states = |sol: &LatentPath, idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| sol.state(i).to_vec()).collect()
    };
    let (ref_grid, ref_idx) = solver_grid(path.knots(), finest)?;
    let reference = solve_cde(&mut field, u0, path, &ref_grid)?;
    let reference = knot_states(&reference, &ref_idx);
    let mut errors = Vec::with_capacity(dt_list.len());
    for &dt in dt_list {
        let (grid, idx) = solver_grid(path.knots(), dt)?;
        let sol = solve_cde(&mut field, u0, path, &grid)?;
        let err = knot_states(&sol, &idx)
            .iter()
            .zip(&reference)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        errors.push(err);
    }
    let slope = if errors.iter().all(|&e| e > 0.0) && dt_list.len() >= 2 {
        let xs: Vec<f64> = dt_list.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(ConvergenceReport {
        dts: dt_list.to_vec(),
        errors,
        slope,
    })
}

//! Substitute hidden confounders from the frequency content of the observed
//! history.
//!
//! For every grid time `t` the history prefix `h_0..h_t` is transformed per
//! channel, split by complementary Gaussian masks into a low and a high
//! band, and brought back to the time domain. Each band's receptive field at
//! `t` passes through its own spectrally bounded convolution; the two
//! feature vectors are concatenated and mapped by a bias-free bounded MLP:
//!
//! ```text
//! z_t = W₂ tanh(W₁ tanh([K_low · win_low(t); K_high · win_high(t)]))
//! ```
//!
//! Every piece is 1-Lipschitz (the masks satisfy `low² + high² ≤ 1` per
//! frequency), so `‖z_t(h) - z_t(h')‖ ≤ ‖h_{≤t} - h'_{≤t}‖`. Only the prefix
//! is used, so `z_t` never depends on later observations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fourier::{dft, gaussian_masks, idft, Spectrum};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchShape {
    pub in_channels: usize,
    /// Output channels of each band's convolution.
    pub conv_channels: usize,
    pub kernel_width: usize,
    pub hidden: usize,
    pub z_dim: usize,
    pub sigma_f: f64,
}

/// Parameter handles of the branch. All four carry a Lipschitz bound of 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderBranch {
    pub shape: BranchShape,
    pub kernel_low: ParamId,
    pub kernel_high: ParamId,
    pub mlp_in: ParamId,
    pub mlp_out: ParamId,
}

/// Receptive fields of the band-limited history prefixes, one per grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct BandWindows {
    pub low: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
}

fn gaussian_init(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl ConfounderBranch {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, shape: BranchShape) -> Result<Self> {
        if shape.z_dim == 0 || shape.in_channels == 0 || shape.conv_channels == 0 || shape.hidden == 0 {
            return Err(Error::contract("branch dimensions must be positive"));
        }
        if shape.kernel_width == 0 || !(shape.sigma_f > 0.0) {
            return Err(Error::contract("kernel width and filter width must be positive"));
        }
        let (ci, co, k) = (shape.in_channels, shape.conv_channels, shape.kernel_width);
        let ks = 1.0 / ((ci * k) as f64).sqrt();
        let kernel_low = store.add("branch.kernel_low", gaussian_init(rng, &[co, ci, k], ks), Some(1.0));
        let kernel_high = store.add("branch.kernel_high", gaussian_init(rng, &[co, ci, k], ks), Some(1.0));
        let mlp_in = store.add(
            "branch.mlp_in",
            gaussian_init(rng, &[shape.hidden, 2 * co], 1.0 / ((2 * co) as f64).sqrt()),
            Some(1.0),
        );
        let mlp_out = store.add(
            "branch.mlp_out",
            gaussian_init(rng, &[shape.z_dim, shape.hidden], 1.0 / (shape.hidden as f64).sqrt()),
            Some(1.0),
        );
        Ok(Self {
            shape,
            kernel_low,
            kernel_high,
            mlp_in,
            mlp_out,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.kernel_low, self.kernel_high, self.mlp_in, self.mlp_out]
    }

    /// `z_t` for one pair of windows. `params` maps `ParamId.0` to graph vars.
    pub fn infer_at(&self, g: &mut Graph, params: &[Var], low: &[f64], high: &[f64]) -> Var {
        let lo = g.constant(low);
        let hi = g.constant(high);
        let f_lo = g.matvec(params[self.kernel_low.0], lo);
        let f_hi = g.matvec(params[self.kernel_high.0], hi);
        let feat = g.concat(&[f_lo, f_hi]);
        let feat = g.tanh(feat);
        let hidden = g.matvec(params[self.mlp_in.0], feat);
        let hidden = g.tanh(hidden);
        g.matvec(params[self.mlp_out.0], hidden)
    }

    pub fn infer_graph(&self, g: &mut Graph, params: &[Var], windows: &BandWindows) -> Vec<Var> {
        windows
            .low
            .iter()
            .zip(&windows.high)
            .map(|(lo, hi)| self.infer_at(g, params, lo, hi))
            .collect()
    }
}

/// Impulse response of the low-pass mask at length `n`. The mask is real
/// and symmetric in frequency, so this is real and filtering is a circular
/// convolution with it; the high band is the remainder.
pub fn low_pass_kernel(n: usize, sigma_f: f64) -> Result<Vec<f64>> {
    let (low, _) = gaussian_masks(n, sigma_f)?;
    idft(&Spectrum {
        real: Tensor::vector(low),
        imag: Tensor::zeros(&[n]),
    })
}

/// Band-limited receptive fields of every prefix of a `T x c` history.
///
/// Equivalent to transforming each prefix, masking and inverting, but only
/// the `width` positions read by the convolution are evaluated.
pub fn band_windows(history: &Tensor, sigma_f: f64, kernel_width: usize) -> Result<BandWindows> {
    let (t_len, ch) = (history.rows(), history.cols());
    if history.shape().len() != 2 || t_len < 2 {
        return Err(Error::contract("history must be a T x c matrix with T >= 2"));
    }
    let half = kernel_width / 2;
    let mut low = Vec::with_capacity(t_len);
    let mut high = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let n = t + 1;
        let kernel = low_pass_kernel(n, sigma_f)?;
        let mut lo_w = vec![0.0; ch * kernel_width];
        let mut hi_w = vec![0.0; ch * kernel_width];
        for k in 0..kernel_width {
            let pos = t as isize + k as isize - half as isize;
            if pos < 0 || pos > t as isize {
                continue;
            }
            let pos = pos as usize;
            for j in 0..ch {
                let lo: f64 = (0..n).map(|q| history.get(q, j) * kernel[(pos + n - q) % n]).sum();
                lo_w[j * kernel_width + k] = lo;
                hi_w[j * kernel_width + k] = history.get(pos, j) - lo;
            }
        }
        low.push(lo_w);
        high.push(hi_w);
    }
    if low.iter().chain(&high).flatten().any(|v| !v.is_finite()) {
        return Err(Error::numerical("band_windows", "non-finite band signal"));
    }
    Ok(BandWindows { low, high })
}

/// Runs the branch on a `T x c` history and returns `T x z_dim` substitutes.
pub fn infer_confounders(history: &Tensor, store: &ParamStore, branch: &ConfounderBranch) -> Result<Tensor> {
    if history.cols() != branch.shape.in_channels {
        return Err(Error::contract(format!(
            "history has {} channels, branch expects {}",
            history.cols(),
            branch.shape.in_channels
        )));
    }
    let windows = band_windows(history, branch.shape.sigma_f, branch.shape.kernel_width)?;
    let mut g = Graph::new();
    let params: Vec<Var> = store.ids().map(|id| g.param(store, id)).collect();
    let z = branch.infer_graph(&mut g, &params, &windows);
    g.check_finite()?;
    let mut out = Vec::with_capacity(z.len() * branch.shape.z_dim);
    for v in z {
        out.extend_from_slice(g.value(v));
    }
    Tensor::matrix(history.rows(), branch.shape.z_dim, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandEnergy {
    pub low: f64,
    pub high: f64,
    pub total: f64,
    pub low_fraction: f64,
    pub high_fraction: f64,
}

/// Parseval energy `Σ_k |X_k · mask_k|² / n` of each band, summed over
/// channels. The masks partition amplitude, so the two fractions need not
/// sum to one.
pub fn band_energy_split(history: &Tensor, sigma_f: f64) -> Result<BandEnergy> {
    let t_len = history.rows();
    if history.shape().len() != 2 || t_len < 2 {
        return Err(Error::contract("history must be a T x c matrix with T >= 2"));
    }
    let (m_lo, m_hi) = gaussian_masks(t_len, sigma_f)?;
    let (mut low, mut high, mut total) = (0.0, 0.0, 0.0);
    for j in 0..history.cols() {
        let spec = dft(&history.column(j))?;
        total += spec.energy();
        low += spec.masked(&m_lo).energy();
        high += spec.masked(&m_hi).energy();
    }
    let frac = |e: f64| if total > 0.0 { e / total } else { 0.0 };
    Ok(BandEnergy {
        low,
        high,
        total,
        low_fraction: frac(low),
        high_fraction: frac(high),
    })
}

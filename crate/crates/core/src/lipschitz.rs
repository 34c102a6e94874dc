//! Spectral-norm projection and Lipschitz-bounded 1-D convolution.

use crate::autodiff::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum power-iteration steps per norm estimate.
pub const MIN_POWER_STEPS: usize = 50;
const MAX_POWER_STEPS: usize = 2000;

/// Largest singular value of `m` viewed as `rows x (len/rows)`, by power
/// iteration on `mᵀm`.
pub fn spectral_norm(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let a = m.data();
    // fixed, non-degenerate start vector keeps the estimate deterministic
    let mut v: Vec<f64> = (0..c).map(|j| 1.0 + 0.1 * ((j * 7 + 3) % 11) as f64).collect();
    normalize(&mut v);
    let mut mv = vec![0.0; r];
    let mut sigma = 0.0;
    for step in 0..MAX_POWER_STEPS {
        for i in 0..r {
            mv[i] = a[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let next_sigma = norm(&mv);
        if next_sigma == 0.0 {
            return 0.0;
        }
        let mut w = vec![0.0; c];
        for i in 0..r {
            let s = mv[i];
            for j in 0..c {
                w[j] += a[i * c + j] * s;
            }
        }
        normalize(&mut w);
        v = w;
        let converged = (next_sigma - sigma).abs() <= 1e-15 * next_sigma;
        sigma = next_sigma;
        if step + 1 >= MIN_POWER_STEPS && converged {
            break;
        }
    }
    // one more Rayleigh evaluation at the converged direction
    for i in 0..r {
        mv[i] = a[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
    }
    sigma.max(norm(&mv))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Relative slack under which a matrix counts as already projected, so
/// re-projecting is a no-op.
const PROJECT_SLACK: f64 = 1e-12;

/// Returns `m · min(1, bound / σ_max(m))`.
pub fn spectral_norm_project(m: &Tensor, bound: f64) -> Tensor {
    let sigma = spectral_norm(m);
    if sigma <= bound * (1.0 + PROJECT_SLACK) || sigma == 0.0 {
        return m.clone();
    }
    m.scale(bound / sigma)
}

/// Flattened receptive field of output position `t`: entry `i*width + k`
/// holds channel `i` at time `t + k - width/2`, zero outside `[0, T)`.
pub fn conv_window(signal: &Tensor, t: usize, width: usize) -> Vec<f64> {
    let (len, ch) = (signal.rows(), signal.cols());
    let half = width / 2;
    let mut w = vec![0.0; ch * width];
    for k in 0..width {
        let pos = t as isize + k as isize - half as isize;
        if pos < 0 || pos >= len as isize {
            continue;
        }
        let row = signal.row(pos as usize);
        for i in 0..ch {
            w[i * width + k] = row[i];
        }
    }
    w
}

/// Same-length cross-correlation of a `T x c_in` signal with a kernel of
/// shape `[c_out, c_in, width]`.
pub fn conv1d(signal: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let ks = kernel.shape();
    if ks.len() != 3 {
        return Err(Error::contract("kernel must have shape [c_out, c_in, width]"));
    }
    let (c_out, c_in, width) = (ks[0], ks[1], ks[2]);
    if signal.shape().len() != 2 || signal.cols() != c_in {
        return Err(Error::contract(format!(
            "signal must be T x {c_in}, got {:?}",
            signal.shape()
        )));
    }
    let t_len = signal.rows();
    if width > 2 * t_len {
        return Err(Error::contract(format!(
            "kernel width {width} exceeds twice the signal length {t_len}"
        )));
    }
    let mut out = Vec::with_capacity(t_len * c_out);
    for t in 0..t_len {
        out.extend(kernel.matvec(&conv_window(signal, t, width)));
    }
    Tensor::matrix(t_len, c_out, out)
}

/// [`conv1d`] with the kernel first projected to its Lipschitz bound
/// (spectral norm of the flattened `c_out x (c_in·width)` matrix).
pub fn lipschitz_conv1d(signal: &Tensor, kernel: &Param) -> Result<Tensor> {
    match kernel.lipschitz_bound {
        Some(b) => conv1d(signal, &spectral_norm_project(&kernel.value, b)),
        None => conv1d(signal, &kernel.value),
    }
}

//! Discrete Fourier transform and Gaussian frequency masks.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length falls back to direct `O(n²)` summation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frequency-indexed real and imaginary parts of a transformed signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    /// Multiplies every bin by a real mask.
    pub fn masked(&self, mask: &[f64]) -> Spectrum {
        let re = self.real.data().iter().zip(mask).map(|(a, m)| a * m).collect();
        let im = self.imag.data().iter().zip(mask).map(|(a, m)| a * m).collect();
        Spectrum {
            real: Tensor::vector(re),
            imag: Tensor::vector(im),
        }
    }

    /// `Σ_k |X_k|² / n`, which equals `Σ_j x_j²` for the source signal.
    pub fn energy(&self) -> f64 {
        let n = self.len() as f64;
        self.real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            / n
    }
}

/// `X_k = Σ_j x_j e^{-2πi jk/n}`.
pub fn dft(signal: &[f64]) -> Result<Spectrum> {
    if signal.is_empty() {
        return Err(Error::contract("dft of an empty signal"));
    }
    let im = vec![0.0; signal.len()];
    let (re, im) = transform(signal, &im, false);
    Ok(Spectrum {
        real: Tensor::vector(re),
        imag: Tensor::vector(im),
    })
}

/// Inverse of [`dft`]; returns the real part of `(1/n) Σ_k X_k e^{2πi jk/n}`.
pub fn idft(spec: &Spectrum) -> Result<Vec<f64>> {
    if spec.is_empty() {
        return Err(Error::contract("idft of an empty spectrum"));
    }
    if spec.real.len() != spec.imag.len() {
        return Err(Error::contract("spectrum real/imag lengths differ"));
    }
    let n = spec.len() as f64;
    let (re, _) = transform(spec.real.data(), spec.imag.data(), true);
    Ok(re.into_iter().map(|v| v / n).collect())
}

fn transform(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    if re.len().is_power_of_two() {
        radix2(re, im, inverse)
    } else {
        naive(re, im, inverse)
    }
}

fn naive(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    // twiddles e^{±2πi m/n}; index jk mod n keeps every angle in [0, 2π)
    let (tw_s, tw_c): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|m| (sign * 2.0 * PI * m as f64 / n as f64).sin_cos())
        .unzip();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        let mut idx = 0;
        for j in 0..n {
            let (s, c) = (tw_s[idx], tw_c[idx]);
            sr += re[j] * c - im[j] * s;
            si += re[j] * s + im[j] * c;
            idx += k;
            if idx >= n {
                idx -= n;
            }
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    (out_re, out_im)
}

fn radix2(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut a_re = re.to_vec();
    let mut a_im = im.to_vec();
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                a_re.swap(i, j);
                a_im.swap(i, j);
            }
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let theta = sign * 2.0 * PI * k as f64 / len as f64;
                let (s, c) = theta.sin_cos();
                let (i, j) = (start + k, start + k + half);
                let tr = a_re[j] * c - a_im[j] * s;
                let ti = a_re[j] * s + a_im[j] * c;
                a_re[j] = a_re[i] - tr;
                a_im[j] = a_im[i] - ti;
                a_re[i] += tr;
                a_im[i] += ti;
            }
        }
        len *= 2;
    }
    (a_re, a_im)
}

/// Signed angular frequency (radians per sample) of bin `k` out of `n`.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let signed = if 2 * k <= n { k as f64 } else { k as f64 - n as f64 };
    2.0 * PI * signed / n as f64
}

/// Gaussian low-pass `exp(-ω²/(2σ²))` and its complement as high-pass.
pub fn gaussian_masks(n: usize, sigma_f: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma_f > 0.0) || !sigma_f.is_finite() {
        return Err(Error::contract(format!("filter width must be positive, got {sigma_f}")));
    }
    if n == 0 {
        return Err(Error::contract("mask length must be positive"));
    }
    let low: Vec<f64> = (0..n)
        .map(|k| {
            let w = bin_frequency(k, n);
            (-w * w / (2.0 * sigma_f * sigma_f)).exp()
        })
        .collect();
    let high = low.iter().map(|l| 1.0 - l).collect();
    Ok((low, high))
}

/// Default filter width: a quarter of the Nyquist frequency (π rad/sample).
pub const DEFAULT_SIGMA_F: f64 = PI / 4.0;

/// Splits a real signal into its Gaussian low- and high-frequency parts.
/// The two parts sum to the input.
pub fn band_split(signal: &[f64], sigma_f: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = dft(signal)?;
    let (low, high) = gaussian_masks(signal.len(), sigma_f)?;
    Ok((idft(&spec.masked(&low))?, idft(&spec.masked(&high))?))
}

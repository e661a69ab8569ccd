//! PSNR, SSIM and MS-SSIM.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) evaluated only where the
//! window fits inside the image. Images smaller than the window fall back to
//! the largest odd window that fits.

use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::linear::LinearOperator;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn same_size(x: &Image, y: &Image) -> Result<()> {
    if x.n() != y.n() {
        return Err(Error::shape(format!("images are {}x{} and {}x{}", x.n(), x.n(), y.n(), y.n())));
    }
    Ok(())
}

pub fn dynamic_range(data: &[f64]) -> f64 {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// `10·log10(peak² / MSE)`; `+∞` when the images coincide. `peak` defaults
/// to the dynamic range of the reference `y`.
pub fn psnr(x: &Image, y: &Image, peak: Option<f64>) -> Result<f64> {
    same_size(x, y)?;
    let peak = peak.unwrap_or_else(|| dynamic_range(y.data()));
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("PSNR peak {} must be positive", peak)));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Window side used for an `n × n` image.
pub fn window_for(n: usize) -> usize {
    if n >= WINDOW {
        WINDOW
    } else if n % 2 == 1 {
        n
    } else {
        n - 1
    }
}

/// Separable Gaussian filter restricted to fully covered positions:
/// `[n × n] → [(n−w+1) × (n−w+1)]`.
#[derive(Clone, Debug)]
pub struct GaussianValid {
    n: usize,
    taps: Vec<f64>,
}

impl GaussianValid {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            taps: gaussian_taps(window_for(n), SIGMA),
        }
    }

    pub fn out_side(&self) -> usize {
        self.n + 1 - self.taps.len()
    }
}

impl LinearOperator for GaussianValid {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.n]
    }
    fn output_shape(&self) -> Vec<usize> {
        let m = self.out_side();
        vec![m, m]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (n, m, w) = (self.n, self.out_side(), self.taps.len());
        let mut rows = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                let mut acc = 0.0;
                for k in 0..w {
                    acc += self.taps[k] * x[r * n + c + k];
                }
                rows[r * m + c] = acc;
            }
        }
        let mut out = vec![0.0; m * m];
        for r in 0..m {
            for c in 0..m {
                let mut acc = 0.0;
                for k in 0..w {
                    acc += self.taps[k] * rows[(r + k) * m + c];
                }
                out[r * m + c] = acc;
            }
        }
        out
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let (n, m, w) = (self.n, self.out_side(), self.taps.len());
        let mut rows = vec![0.0; n * m];
        for r in 0..m {
            for c in 0..m {
                let v = y[r * m + c];
                for k in 0..w {
                    rows[(r + k) * m + c] += self.taps[k] * v;
                }
            }
        }
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..m {
                let v = rows[r * m + c];
                for k in 0..w {
                    out[r * n + c + k] += self.taps[k] * v;
                }
            }
        }
        out
    }
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_parts(x: &[f64], y: &[f64], n: usize, peak: f64) -> (f64, f64) {
    let g = GaussianValid::new(n);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let mx = g.apply(x);
    let my = g.apply(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = g.apply(&xx);
    let eyy = g.apply(&yy);
    let exy = g.apply(&xy);
    let len = mx.len() as f64;
    let (mut s, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let vx = exx[i] - mx[i] * mx[i];
        let vy = eyy[i] - my[i] * my[i];
        let cov = exy[i] - mx[i] * my[i];
        let lum = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        let con = (2.0 * cov + c2) / (vx + vy + c2);
        s += lum * con;
        cs += con;
    }
    (s / len, cs / len)
}

fn resolve_peak(x: &Image, y: &Image, peak: Option<f64>) -> Result<f64> {
    let peak = peak.unwrap_or_else(|| {
        let lo = x.data().iter().chain(y.data()).cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().chain(y.data()).cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    });
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("SSIM peak {} must be positive", peak)));
    }
    Ok(peak)
}

/// Single-scale SSIM. `peak` defaults to the joint dynamic range of both
/// images, which keeps the index symmetric.
pub fn ssim(x: &Image, y: &Image, peak: Option<f64>) -> Result<f64> {
    same_size(x, y)?;
    let peak = resolve_peak(x, y, peak)?;
    Ok(ssim_parts(x.data(), y.data(), x.n(), peak).0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    /// Scales actually used (fewer than 5 when the image is too small).
    pub levels: usize,
}

fn downsample(x: &[f64], n: usize) -> (Vec<f64>, usize) {
    let m = n / 2;
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            let i = 2 * r * n + 2 * c;
            out[r * m + c] = 0.25 * (x[i] + x[i + 1] + x[i + n] + x[i + n + 1]);
        }
    }
    (out, m)
}

/// Multi-scale SSIM over a 2×2 mean-pool pyramid with the standard five
/// exponents. When fewer than five scales fit an 11-pixel window, the
/// feasible scales are used with exponents renormalised to sum to one.
pub fn ms_ssim(x: &Image, y: &Image, peak: Option<f64>) -> Result<MsSsim> {
    same_size(x, y)?;
    let peak = resolve_peak(x, y, peak)?;
    let mut levels = 1;
    while levels < MS_SSIM_WEIGHTS.len() && (x.n() >> levels) >= WINDOW {
        levels += 1;
    }
    let total: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let (mut xs, mut ys, mut n) = (x.data().to_vec(), y.data().to_vec(), x.n());
    let mut value = 1.0;
    for l in 0..levels {
        let (s, cs) = ssim_parts(&xs, &ys, n, peak);
        let w = MS_SSIM_WEIGHTS[l] / total;
        let term = if l + 1 == levels { s } else { cs };
        value *= term.max(0.0).powf(w);
        if l + 1 < levels {
            let (nx, m) = downsample(&xs, n);
            let (ny, _) = downsample(&ys, n);
            xs = nx;
            ys = ny;
            n = m;
        }
    }
    Ok(MsSsim { value, levels })
}

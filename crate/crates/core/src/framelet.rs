//! Undecimated piecewise-linear tight wavelet frame.
//!
//! 1D masks `h0 = ¼[1, 2, 1]`, `h1 = (√2/4)[1, 0, −1]`, `h2 = ¼[−1, 2, −1]`;
//! 2D channel `(i, j)` filters rows with `hᵢ` and columns with `hⱼ`. Channel
//! `(0, 0)` is the lowpass, the other eight form `W`. Filtering is
//! correlation with half-point symmetric extension (`u[−1] = u[0]`), the
//! boundary rule under which `Σᵢ AᵢᵀAᵢ = I` holds exactly, so
//! `L₀ᵀL₀ + WᵀW = I` for every image size.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageGrid};
use crate::linear::LinearOperator;
use crate::tensor::Tensor;

/// Number of highpass channels.
pub const HIGHPASS_CHANNELS: usize = 8;

const S2: f64 = std::f64::consts::SQRT_2 / 4.0;

/// The three 1D masks, indexed by offsets −1, 0, +1.
pub const MASKS: [[f64; 3]; 3] = [
    [0.25, 0.5, 0.25],
    [S2, 0.0, -S2],
    [-0.25, 0.5, -0.25],
];

/// Highpass channel order: `(row mask, column mask)` pairs.
pub const CHANNELS: [(usize, usize); HIGHPASS_CHANNELS] = [
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 1),
    (1, 2),
    (2, 0),
    (2, 1),
    (2, 2),
];

/// Highpass coefficients `[M × n × n]` plus optional lowpass `[n × n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCoeffs {
    pub channels: Tensor,
    pub lowpass: Option<Tensor>,
}

impl FrameCoeffs {
    pub fn n(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let plane = self.n() * self.n();
        &self.channels.data()[m * plane..(m + 1) * plane]
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if i < 0 {
        (-i - 1) as usize
    } else if i >= n {
        (2 * n - i - 1) as usize
    } else {
        i as usize
    }
}

/// Filters every row (`along_rows = true`) or column of an `n × n` plane.
fn filter(src: &[f64], n: usize, mask: &[f64; 3], along_rows: bool) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for (k, &w) in mask.iter().enumerate() {
                let j = reflect(b as isize + k as isize - 1, n);
                let idx = if along_rows { a * n + j } else { j * n + a };
                acc += w * src[idx];
            }
            let o = if along_rows { a * n + b } else { b * n + a };
            out[o] = acc;
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_adjoint(src: &[f64], n: usize, mask: &[f64; 3], along_rows: bool, out: &mut [f64]) {
    for a in 0..n {
        for b in 0..n {
            let v = if along_rows { src[a * n + b] } else { src[b * n + a] };
            for (k, &w) in mask.iter().enumerate() {
                let j = reflect(b as isize + k as isize - 1, n);
                let idx = if along_rows { a * n + j } else { j * n + a };
                out[idx] += w * v;
            }
        }
    }
}

fn check_plane(u: &[f64], n: usize) -> Result<()> {
    if u.len() != n * n {
        return Err(Error::shape(format!("expected {} pixels, got {}", n * n, u.len())));
    }
    Ok(())
}

/// All nine channels in order `(0,0)` then [`CHANNELS`].
fn analyze_raw(u: &[f64], n: usize) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = MASKS.iter().map(|m| filter(u, n, m, true)).collect();
    std::iter::once((0usize, 0usize))
        .chain(CHANNELS.iter().copied())
        .map(|(i, j)| filter(&rows[i], n, &MASKS[j], false))
        .collect()
}

/// Full decomposition (highpass channels and lowpass).
pub fn analyze(img: &Image) -> FrameCoeffs {
    let n = img.n();
    let mut all = analyze_raw(img.data(), n);
    let low = all.remove(0);
    FrameCoeffs {
        channels: Tensor::from_raw(vec![HIGHPASS_CHANNELS, n, n], all.concat()),
        lowpass: Some(Tensor::from_raw(vec![n, n], low)),
    }
}

/// `W u`: the eight highpass channels, flattened `[M × n × n]`.
pub fn w_apply_raw(u: &[f64], n: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = MASKS.iter().map(|m| filter(u, n, m, true)).collect();
    let mut out = Vec::with_capacity(HIGHPASS_CHANNELS * n * n);
    for &(i, j) in CHANNELS.iter() {
        out.extend(filter(&rows[i], n, &MASKS[j], false));
    }
    out
}

/// `Σ_m γ_m W_mᵀ c_m`. `gammas` holds one weight per channel.
pub fn w_adjoint_weighted_raw(c: &[f64], n: usize, gammas: &[f64; HIGHPASS_CHANNELS]) -> Vec<f64> {
    let plane = n * n;
    // Column adjoints first, grouped by row mask so each row adjoint runs once.
    let mut by_row = [vec![0.0; plane], vec![0.0; plane], vec![0.0; plane]];
    for (m, &(i, j)) in CHANNELS.iter().enumerate() {
        let g = gammas[m];
        if g == 0.0 {
            continue;
        }
        let src: Vec<f64> = c[m * plane..(m + 1) * plane].iter().map(|v| g * v).collect();
        filter_adjoint(&src, n, &MASKS[j], false, &mut by_row[i]);
    }
    let mut out = vec![0.0; plane];
    for (i, buf) in by_row.iter().enumerate() {
        filter_adjoint(buf, n, &MASKS[i], true, &mut out);
    }
    out
}

pub fn w_adjoint_raw(c: &[f64], n: usize) -> Vec<f64> {
    w_adjoint_weighted_raw(c, n, &[1.0; HIGHPASS_CHANNELS])
}

/// `L₀ᵀ l`: adjoint of the lowpass channel.
pub fn lowpass_adjoint_raw(l: &[f64], n: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; n * n];
    filter_adjoint(l, n, &MASKS[0], false, &mut tmp);
    let mut out = vec![0.0; n * n];
    filter_adjoint(&tmp, n, &MASKS[0], true, &mut out);
    out
}

pub fn w_apply(img: &Image) -> FrameCoeffs {
    let n = img.n();
    FrameCoeffs {
        channels: Tensor::from_raw(vec![HIGHPASS_CHANNELS, n, n], w_apply_raw(img.data(), n)),
        lowpass: None,
    }
}

pub fn w_adjoint(c: &FrameCoeffs, grid: ImageGrid) -> Result<Image> {
    let n = grid.n;
    if c.channels.shape() != [HIGHPASS_CHANNELS, n, n] {
        return Err(Error::shape(format!(
            "coefficients {:?} do not match a {}x{} image",
            c.channels.shape(),
            n,
            n
        )));
    }
    Ok(Image::from_raw(grid, w_adjoint_raw(c.channels.data(), n)))
}

/// Reconstruction from a full decomposition: `L₀ᵀ l + Wᵀ c`.
pub fn synthesize(c: &FrameCoeffs, grid: ImageGrid) -> Result<Image> {
    let mut img = w_adjoint(c, grid)?;
    if let Some(low) = &c.lowpass {
        check_plane(low.data(), grid.n)?;
        let l = lowpass_adjoint_raw(low.data(), grid.n);
        for (a, b) in img.data_mut().iter_mut().zip(l) {
            *a += b;
        }
    }
    Ok(img)
}

/// `W` as a linear operator `[n × n] → [M × n × n]`.
#[derive(Clone, Debug)]
pub struct FrameletOp {
    n: usize,
}

impl FrameletOp {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn arc(n: usize) -> Arc<dyn LinearOperator> {
        Arc::new(Self::new(n))
    }
}

impl LinearOperator for FrameletOp {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.n]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![HIGHPASS_CHANNELS, self.n, self.n]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        w_apply_raw(x, self.n)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        w_adjoint_raw(y, self.n)
    }
}

/// `c ↦ Σ_m γ_m W_mᵀ c_m`, i.e. `(γW)ᵀ` as a linear operator
/// `[M × n × n] → [n × n]`.
#[derive(Clone, Debug)]
pub struct WeightedSynthesisOp {
    n: usize,
    gammas: [f64; HIGHPASS_CHANNELS],
}

impl WeightedSynthesisOp {
    pub fn new(n: usize, gammas: [f64; HIGHPASS_CHANNELS]) -> Self {
        Self { n, gammas }
    }
}

impl LinearOperator for WeightedSynthesisOp {
    fn input_shape(&self) -> Vec<usize> {
        vec![HIGHPASS_CHANNELS, self.n, self.n]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.n]
    }
    fn apply(&self, c: &[f64]) -> Vec<f64> {
        w_adjoint_weighted_raw(c, self.n, &self.gammas)
    }
    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        let mut out = w_apply_raw(u, self.n);
        let plane = self.n * self.n;
        for (m, chunk) in out.chunks_mut(plane).enumerate() {
            let g = self.gammas[m];
            for v in chunk {
                *v *= g;
            }
        }
        out
    }
}

//! Ray-driven projector with bilinear interpolation.
//!
//! Each ray is sampled every half pixel; every sample spreads `step ×
//! bilinear weight` onto its four neighbouring pixels. The weights are
//! assembled once into a sparse matrix, so `Pᵀ` is literally the transpose of
//! the interpolation weights used by `P`. Both products run row-parallel with
//! a fixed per-row summation order, which keeps results independent of the
//! number of threads.

use std::sync::Arc;

use rayon::prelude::*;

use super::{Beam, Image, ImageGrid, ScanGeometry, Sinogram};
use crate::error::{Error, Result};
use crate::linear::{DenseMatrix, LinearOperator};

/// Compressed sparse rows.
#[derive(Clone, Debug)]
struct Csr {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in self.offsets[r]..self.offsets[r + 1] {
            acc += self.values[k] * x[self.indices[k] as usize];
        }
        acc
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let rows = self.offsets.len() - 1;
        let mut out = vec![0.0; rows];
        out.par_iter_mut()
            .with_min_len(64)
            .enumerate()
            .for_each(|(r, o)| *o = self.row_dot(r, x));
        out
    }

    /// Transpose with entries of each new row kept in ascending old-row order.
    fn transpose(&self, cols: usize) -> Csr {
        let mut counts = vec![0usize; cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..cols {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut indices = vec![0u32; self.indices.len()];
        let mut values = vec![0.0; self.values.len()];
        let rows = self.offsets.len() - 1;
        for r in 0..rows {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let c = self.indices[k] as usize;
                indices[fill[c]] = r as u32;
                values[fill[c]] = self.values[k];
                fill[c] += 1;
            }
        }
        Csr {
            offsets,
            indices,
            values,
        }
    }
}

/// Matched forward/back projector for one [`ScanGeometry`].
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: ScanGeometry,
    rows: Csr,
    cols: Csr,
}

impl Projector {
    pub fn new(geometry: &ScanGeometry) -> Result<Self> {
        geometry.validate()?;
        let g = geometry.clone();
        let n_det = g.n_det;
        let per_ray: Vec<Vec<(u32, f64)>> = (0..g.n_rays())
            .into_par_iter()
            .with_min_len(16)
            .map(|ray| ray_weights(&g, ray / n_det, ray % n_det))
            .collect();
        let mut offsets = Vec::with_capacity(per_ray.len() + 1);
        offsets.push(0);
        let total: usize = per_ray.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        for entries in per_ray {
            for (c, v) in entries {
                indices.push(c);
                values.push(v);
            }
            offsets.push(indices.len());
        }
        let rows = Csr {
            offsets,
            indices,
            values,
        };
        let cols = rows.transpose(g.grid.numel());
        Ok(Self {
            geometry: g,
            rows,
            cols,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.rows.values.len()
    }

    /// `P u` on raw pixel data.
    pub fn forward_raw(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.geometry.grid.numel());
        self.rows.matvec(u)
    }

    /// `Pᵀ y` on raw sinogram data.
    pub fn back_raw(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.geometry.n_rays());
        self.cols.matvec(y)
    }

    pub fn forward(&self, img: &Image) -> Result<Sinogram> {
        self.geometry.check_image(img)?;
        Ok(Sinogram::from_raw(
            self.geometry.n_views(),
            self.geometry.n_det,
            self.forward_raw(img.data()),
        ))
    }

    pub fn back(&self, s: &Sinogram) -> Result<Image> {
        self.geometry.check_sinogram(s)?;
        Ok(Image::from_raw(self.geometry.grid, self.back_raw(s.data())))
    }

    /// `P` as a [`LinearOperator`] (image → sinogram).
    pub fn operator(self: &Arc<Self>) -> Arc<dyn LinearOperator> {
        Arc::new(ProjectionOp(Arc::clone(self)))
    }

    /// `Pᵀ` as a [`LinearOperator`] (sinogram → image).
    pub fn adjoint_operator(self: &Arc<Self>) -> Arc<dyn LinearOperator> {
        Arc::new(BackProjectionOp(Arc::clone(self)))
    }
}

struct ProjectionOp(Arc<Projector>);
struct BackProjectionOp(Arc<Projector>);

impl LinearOperator for ProjectionOp {
    fn input_shape(&self) -> Vec<usize> {
        let n = self.0.geometry.grid.n;
        vec![n, n]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.0.geometry.n_views(), self.0.geometry.n_det]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.forward_raw(x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.0.back_raw(y)
    }
}

impl LinearOperator for BackProjectionOp {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.0.geometry.n_views(), self.0.geometry.n_det]
    }
    fn output_shape(&self) -> Vec<usize> {
        let n = self.0.geometry.grid.n;
        vec![n, n]
    }
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        self.0.back_raw(y)
    }
    fn adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.0.forward_raw(x)
    }
}

/// Origin and unit direction of ray `(view, det)`.
fn ray(g: &ScanGeometry, view: usize, det: usize) -> ((f64, f64), (f64, f64)) {
    let beta = g.angles[view];
    let (s, c) = beta.sin_cos();
    let u = g.det_offset(det);
    match g.beam {
        Beam::Parallel => {
            // Detector axis e_s = (cos, sin), rays along e_d = (−sin, cos).
            ((u * c, u * s), (-s, c))
        }
        Beam::Fan => {
            let src = (g.src_to_center * c, g.src_to_center * s);
            let det_pt = (
                -g.det_to_center * c - u * s,
                -g.det_to_center * s + u * c,
            );
            let (dx, dy) = (det_pt.0 - src.0, det_pt.1 - src.1);
            let len = (dx * dx + dy * dy).sqrt();
            (src, (dx / len, dy / len))
        }
    }
}

/// Parameter interval where the ray is inside the square `[-hw, hw]²`.
fn clip(origin: (f64, f64), dir: (f64, f64), hw: f64) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (o, d) in [(origin.0, dir.0), (origin.1, dir.1)] {
        if d.abs() < 1e-15 {
            if o.abs() >= hw {
                return None;
            }
        } else {
            let a = (-hw - o) / d;
            let b = (hw - o) / d;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// Merged, column-sorted interpolation weights of one ray.
fn ray_weights(g: &ScanGeometry, view: usize, det: usize) -> Vec<(u32, f64)> {
    let ImageGrid { n, pixel_size: ps } = g.grid;
    let (origin, dir) = ray(g, view, det);
    let hw = (n as f64 + 1.0) / 2.0 * ps;
    let Some((t0, t1)) = clip(origin, dir, hw) else {
        return Vec::new();
    };
    let step = ps / 2.0;
    let samples = ((t1 - t0) / step).ceil() as usize;
    let centre = (n as f64 - 1.0) / 2.0;
    let mut raw: Vec<(u32, f64)> = Vec::with_capacity(samples * 4);
    for k in 0..samples {
        let t = t0 + (k as f64 + 0.5) * step;
        let x = origin.0 + t * dir.0;
        let y = origin.1 + t * dir.1;
        let fc = x / ps + centre;
        let fr = centre - y / ps;
        let c0 = fc.floor();
        let r0 = fr.floor();
        let wc = fc - c0;
        let wr = fr - r0;
        let (c0, r0) = (c0 as i64, r0 as i64);
        for (dr, wy) in [(0, 1.0 - wr), (1, wr)] {
            let r = r0 + dr;
            if r < 0 || r >= n as i64 || wy == 0.0 {
                continue;
            }
            for (dc, wx) in [(0, 1.0 - wc), (1, wc)] {
                let c = c0 + dc;
                if c < 0 || c >= n as i64 || wx == 0.0 {
                    continue;
                }
                raw.push(((r as usize * n + c as usize) as u32, step * wy * wx));
            }
        }
    }
    // Stable sort keeps sample order among equal columns, so the merged sums
    // are reproducible.
    raw.sort_by_key(|e| e.0);
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(raw.len() / 2);
    for (c, w) in raw {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += w,
            _ => merged.push((c, w)),
        }
    }
    merged
}

/// One-shot `P u`. Builds a [`Projector`]; reuse one when projecting repeatedly.
pub fn forward_project(img: &Image, g: &ScanGeometry) -> Result<Sinogram> {
    g.check_image(img)?;
    Projector::new(g)?.forward(img)
}

/// One-shot `Pᵀ y`.
pub fn back_project(s: &Sinogram, g: &ScanGeometry) -> Result<Image> {
    g.check_sinogram(s)?;
    Projector::new(g)?.back(s)
}

/// Explicit system matrix (rows = rays, columns = pixels), assembled column by
/// column from projections of unit-pixel images.
pub fn as_dense_matrix(g: &ScanGeometry) -> Result<DenseMatrix> {
    let numel = g.grid.numel();
    if numel > 4096 {
        return Err(Error::invalid(format!(
            "dense system matrix limited to 4096 pixels, grid has {}",
            numel
        )));
    }
    let p = Projector::new(g)?;
    let mut m = DenseMatrix::zeros(g.n_rays(), numel);
    let mut unit = vec![0.0; numel];
    for j in 0..numel {
        unit[j] = 1.0;
        let col = p.forward_raw(&unit);
        for (r, v) in col.into_iter().enumerate() {
            m.set(r, j, v);
        }
        unit[j] = 0.0;
    }
    Ok(m)
}

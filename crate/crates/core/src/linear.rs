//! Linear operators with an explicit adjoint.
//!
//! Everything the reconstruction pipeline treats as a matrix (`P`, `Pᵀ`, `W`,
//! the CG system operator) implements [`LinearOperator`], which is also what
//! the autodiff tape records: the vector-Jacobian product of `x ↦ Lx` is `Lᵀ`.

use crate::error::{Error, Result};
use crate::tensor::dot;

pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;

    fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }
}

/// Relative mismatch `|⟨Lx, y⟩ − ⟨x, Lᵀy⟩| / (‖Lx‖‖y‖ + 1)` of an adjoint pair.
pub fn adjoint_mismatch(op: &dyn LinearOperator, x: &[f64], y: &[f64]) -> f64 {
    let lx = op.apply(x);
    let lty = op.adjoint(y);
    let lhs = dot(&lx, y);
    let rhs = dot(x, &lty);
    (lhs - rhs).abs() / (crate::tensor::norm(&lx) * crate::tensor::norm(y) + 1.0)
}

#[derive(Clone, Debug)]
pub struct Identity {
    shape: Vec<usize>,
}

impl Identity {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
        }
    }
}

impl LinearOperator for Identity {
    fn input_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn output_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }
}

/// Explicit row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..self.cols {
                    acc += self.data[r * self.cols + c] * x[c];
                }
                acc
            })
            .collect()
    }
}

impl LinearOperator for DenseMatrix {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cols]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.rows]
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.data[r * self.cols + c] * y[r];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_adjoint_matches_transpose() {
        let a = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = [1.0, -1.0];
        assert_eq!(a.adjoint(&y), a.transpose().matvec(&y));
        assert!(adjoint_mismatch(&a, &[0.5, 1.0, -2.0], &y) < 1e-15);
    }
}

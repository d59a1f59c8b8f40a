//! Dense row-major f64 tensors: the value and gradient carrier for every
//! model in this crate.
//!
//! Tensors are immutable values once constructed; every operation returns a
//! fresh tensor. Public constructors and kernels reject non-finite values so
//! NaN/Inf cannot propagate silently into training.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("row index {row} out of bounds for {rows} rows")]
    RowOutOfBounds { row: usize, rows: usize },
}

/// Dense tensor: `shape` dims, row-major `data`, 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/data length agreement and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// n×n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a matrix (a 1-d tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a matrix (a 1-d tensor is one row of `len` columns).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// View as a (1×n) row matrix.
    pub fn into_row(self) -> Tensor {
        let n = self.data.len();
        Tensor {
            shape: vec![1, n],
            data: self.data,
        }
    }

    pub fn row(&self, r: usize) -> Result<Tensor, TensorError> {
        let (rows, cols) = (self.rows(), self.cols());
        if r >= rows {
            return Err(TensorError::RowOutOfBounds { row: r, rows });
        }
        Ok(Tensor {
            shape: vec![1, cols],
            data: self.data[r * cols..(r + 1) * cols].to_vec(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i });
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::DimMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Matrix product of two 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(TensorError::NotAMatrix {
            op: "matmul",
            shape: if a.is_matrix() {
                b.shape.clone()
            } else {
                a.shape.clone()
            },
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::DimMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    // i-k-j order: the inner loop walks contiguous rows of B and C.
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Elementwise sum; the right operand may be a (1×c) row broadcast over (r×c).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.rows() == 1 && b.cols() == a.cols() {
        let cols = a.cols();
        let mut data = a.data.clone();
        for row in data.chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b.data.iter()) {
                *v += bv;
            }
        }
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(TensorError::DimMismatch {
        op: "add",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("sub", a, b)?;
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| x - y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor, TensorError> {
    if !a.is_matrix() {
        return Err(TensorError::NotAMatrix {
            op: "transpose",
            shape: a.shape.clone(),
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data,
    })
}

/// Stacks matrices with identical column counts by rows.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let cols = parts
        .first()
        .map(|t| t.cols())
        .ok_or(TensorError::NotAMatrix {
            op: "concat_rows",
            shape: vec![],
        })?;
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(TensorError::DimMismatch {
                op: "concat_rows",
                lhs: vec![rows, cols],
                rhs: p.shape.clone(),
            });
        }
        rows += p.rows();
    }
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, cols],
        data,
    })
}

/// Selects rows of a matrix by index, in order (duplicates allowed).
pub fn gather_rows(a: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &r in indices {
        if r >= rows {
            return Err(TensorError::RowOutOfBounds { row: r, rows });
        }
        data.extend_from_slice(&a.data[r * cols..(r + 1) * cols]);
    }
    Ok(Tensor {
        shape: vec![indices.len(), cols],
        data,
    })
}

/// Sum of squared entries (squared Frobenius norm; squared l2 for vectors).
pub fn frobenius_sq(a: &Tensor) -> f64 {
    a.data.iter().map(|&v| v * v).sum()
}

pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    same_shape("dot", a, b)?;
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum())
}

/// Squared euclidean distance between two rows of (possibly different) matrices.
pub fn row_sqdist(a: &Tensor, ra: usize, b: &Tensor, rb: usize) -> f64 {
    let ca = a.cols();
    let arow = &a.data[ra * ca..(ra + 1) * ca];
    let brow = &b.data[rb * ca..(rb + 1) * ca];
    arow.iter()
        .zip(brow.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { index: 1 });
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::eye(2);
        let x = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let y = matmul(&a, &x).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associativity_small() {
        // well-conditioned fixed matrices
        let a = Tensor::matrix(2, 2, vec![1.0, 0.5, -0.25, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.75, -1.0, 0.5, 0.125]).unwrap();
        let c = Tensor::matrix(2, 2, vec![2.0, 1.0, -0.5, 0.25]).unwrap();
        let lhs = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let rhs = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn broadcast_add_rows() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![10.0, 20.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = transpose(&transpose(&a).unwrap()).unwrap();
        assert_eq!(a, t);
    }

    #[test]
    fn gather_preserves_order_and_duplicates() {
        let a = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = gather_rows(&a, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn frobenius_matches_brute_force() {
        let a = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let brute: f64 = a.data().iter().map(|v| v * v).sum();
        assert_eq!(frobenius_sq(&a), brute);
    }
}

//! Dense row-major `f64` tensors and the 1-D patch-matrix operator used to
//! express convolution as a plain matrix product.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("kernel size must be odd and >= 1, got {0}")]
    EvenKernel(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Dense tensor of 64-bit floats. Rank 0 (scalar), 1 and 2 are used.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} holds {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "mul", |a, b| a * b)
    }

    fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Frobenius inner product; tensors must share a shape.
    pub fn dot(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self (r x k) * other (k x c)`, plain row-major triple loop.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for t in 0..k {
                let a = self.data[i * k + t];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[t * c..(t + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// Patch matrix of a `(m, p)` input for an odd kernel size `k_c`.
///
/// Output row `i * k_c + j` at column `t` holds `Z[i, t + j - p_c]` with
/// zero padding `p_c = (k_c - 1) / 2`, so that `W * patches(Z)` is the
/// standard stride-1 same-padded 1-D convolution.
pub fn patches(z: &Tensor, k_c: usize) -> Result<Tensor, TensorError> {
    if k_c == 0 || k_c % 2 == 0 {
        return Err(TensorError::EvenKernel(k_c));
    }
    if z.shape().len() != 2 {
        return Err(TensorError::Invalid(format!(
            "patches expects a rank-2 tensor, got shape {:?}",
            z.shape()
        )));
    }
    let (m, p) = (z.rows(), z.cols());
    let pad = (k_c - 1) / 2;
    let mut out = Tensor::zeros(vec![k_c * m, p]);
    for i in 0..m {
        for j in 0..k_c {
            let row = i * k_c + j;
            for t in 0..p {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < p {
                    let v = z.at(i, src as usize);
                    out.set(row, t, v);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`patches`]: scatter-adds a `(k_c * m, p)` matrix back onto the
/// `(m, p)` source layout, summing every position a source entry was copied to.
pub fn patches_adjoint(g: &Tensor, m: usize, p: usize, k_c: usize) -> Tensor {
    debug_assert_eq!(g.rows(), k_c * m);
    debug_assert_eq!(g.cols(), p);
    let pad = (k_c - 1) / 2;
    let mut out = Tensor::zeros(vec![m, p]);
    for i in 0..m {
        for j in 0..k_c {
            let row = i * k_c + j;
            for t in 0..p {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < p {
                    let v = out.at(i, src as usize) + g.at(row, t);
                    out.set(i, src as usize, v);
                }
            }
        }
    }
    out
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", &[&shape, &[data.len()]]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len(), width]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::shape("from_rows", &[&[width], &[row.len()]]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` when the tensor is viewed as a stack of last-axis rows.
    pub fn row_view(&self) -> (usize, usize) {
        match self.shape.last() {
            None => (1, 1),
            Some(&0) => (0, 0),
            Some(&cols) => (self.data.len() / cols, cols),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.row_view();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let (_, cols) = self.row_view();
        self.data.chunks(cols.max(1))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &[&self.shape, &shape]));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &[&self.shape, &other.shape]));
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// `self += factor * other`, in place.
    pub fn axpy(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &[&self.shape, &other.shape]));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn ln_clamped(&self) -> Tensor {
        self.map(|v| v.max(LOG_FLOOR).ln())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Sum over the last axis; the result keeps a trailing axis of length 1.
    pub fn sum_rows(&self) -> Tensor {
        let (rows, _) = self.row_view();
        let data: Vec<f64> = self.rows().map(|r| r.iter().sum()).take(rows).collect();
        Tensor {
            shape: vec![rows, 1],
            data,
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &[&self.shape])),
        }
    }

    /// `self · other` for `[r, k] · [k, c]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.require_matrix("matmul")?;
        let (k2, c) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[&self.shape, &other.shape]));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * c..(i + 1) * c];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * c..(p + 1) * c];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// `self · otherᵀ` for `[r, k] · [c, k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.require_matrix("matmul_nt")?;
        let (c, k2) = other.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[&self.shape, &other.shape]));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..c {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.push(a_row.iter().zip(b_row).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// `selfᵀ · other` for `[k, r]ᵀ · [k, c]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, r) = self.require_matrix("matmul_tn")?;
        let (k2, c) = other.require_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &[&self.shape, &other.shape]));
        }
        let mut out = vec![0.0; r * c];
        for p in 0..k {
            let a_row = &self.data[p * r..(p + 1) * r];
            let b_row = &other.data[p * c..(p + 1) * c];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * c..(i + 1) * c];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Adds a bias vector of length `cols` to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, cols) = self.require_matrix("add_bias")?;
        if bias.len() != cols || bias.shape.len() != 1 {
            return Err(Error::shape("add_bias", &[&self.shape, &bias.shape]));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&self) -> Tensor {
        let (_, cols) = self.row_view();
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let (_, cols) = self.row_view();
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Divides every last-axis row by its Euclidean norm. Zero rows are an
    /// error: they have no direction.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (_, cols) = self.row_view();
        let mut out = self.clone();
        for (r, row) in out.data.chunks_mut(cols.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {r} has zero norm"),
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(out)
    }

    /// Concatenates along the first axis; trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", &[]));
        };
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "concat_rows",
                    &parts.iter().map(|t| t.shape.as_slice()).collect::<Vec<_>>(),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Selects rows of a matrix by index, in the given order (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.require_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather_rows", &[&self.shape, &[i]]));
            }
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Tensor::new(vec![indices.len(), cols], data)
    }
}

/// Probabilities are clamped to this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Cosine similarity `aᵀb / (‖a‖‖b‖)` of two equal-length vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[&[a.len()], &[b.len()]]));
    }
    let na2: f64 = a.iter().map(|v| v * v).sum();
    let nb2: f64 = b.iter().map(|v| v * v).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::Degenerate {
            op: "cosine_similarity",
            detail: "zero-norm operand".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

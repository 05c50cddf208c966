//! Dense row-major `f32` tensors and the handful of kernels GPT-2 needs.
//!
//! Every kernel is pure and reduces in sequential index order, so identical
//! inputs always give bitwise-identical outputs.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: range {start}..{end} out of bounds for extent {extent}")]
    OutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f32]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a matrix.
    ///
    /// Panics if the tensor is not 2-D or `i` is out of range.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("row() on a scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Columns `start..end` of a matrix, as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(TensorError::OutOfBounds {
                op: "slice_cols",
                start,
                end,
                extent: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + end]);
        }
        Self::new(vec![rows, end - start], data)
    }

    /// Rows `start..end` of a matrix, as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if start >= end || end > rows {
            return Err(TensorError::OutOfBounds {
                op: "slice_rows",
                start,
                end,
                extent: rows,
            });
        }
        Self::new(
            vec![end - start, cols],
            self.data[start * cols..end * cols].to_vec(),
        )
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::ZeroExtent(vec![0]))?;
        let (rows, _) = first.dims2("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self::new(vec![rows, total], data)
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Self::new(self.shape.clone(), data).and_then(|t| t.check_finite("add"))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Returns `self` unchanged if every value is finite.
    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { op, index }),
            None => Ok(self),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.data.len()
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
///
/// Each output element accumulates `a[i][t]·b[t][j]` for `t = 0, 1, …, k-1`
/// in that order, starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = a.row(i);
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`, without materializing the transpose.
///
/// Same sequential reduction order as [`matmul`].
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_transposed")?;
    let (n, k2) = b.dims2("matmul_transposed")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_transposed",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    // Eight rows of `b` at a time: independent accumulators, each still
    // summed in order over `t`, so results match the naive loop bit for bit.
    const LANES: usize = 8;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        let full = n - n % LANES;
        for j0 in (0..full).step_by(LANES) {
            let rows: [&[f32]; LANES] = std::array::from_fn(|l| b.row(j0 + l));
            let mut acc = [0.0f32; LANES];
            for (t, x) in a_row.iter().enumerate() {
                for l in 0..LANES {
                    acc[l] += x * rows[l][t];
                }
            }
            out_row[j0..j0 + LANES].copy_from_slice(&acc);
        }
        for j in full..n {
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out_row[j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul_transposed")
}

/// `x · w + bias`, bias broadcast along rows.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, d_out) = w.dims2("linear")?;
    if bias.shape() != [d_out] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: w.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut y = matmul(x, w)?;
    for row in y.data.chunks_exact_mut(d_out) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    y.check_finite("linear")
}

/// Per-row LayerNorm with population variance: `(x − μ)/√(σ² + eps)·γ + β`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (rows, d) = x.dims2("layer_norm")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: if gamma.shape() != [d] {
                gamma.shape.clone()
            } else {
                beta.shape.clone()
            },
        });
    }
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().fold(0.0f32, |acc, &v| acc + v) / d as f32;
        let var = row.iter().fold(0.0f32, |acc, &v| {
            let c = v - mean;
            acc + c * c
        }) / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((&v, &g), &b) in row.iter().zip(&gamma.data).zip(&beta.data) {
            out.push((v - mean) * inv * g + b);
        }
    }
    Tensor::new(vec![rows, d], out)?.check_finite("layer_norm")
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Numerically stable softmax of one slice, written into `out`.
pub fn softmax_slice(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape.last().unwrap_or(&1);
    let mut data = vec![0.0f32; x.data.len()];
    for (src, dst) in x.data.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
        softmax_slice(src, dst);
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

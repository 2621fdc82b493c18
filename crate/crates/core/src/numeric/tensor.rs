//! Dense row-major `f64` tensors and the untracked kernels the tape builds on.

use super::NumericError;

/// A dense tensor of 64-bit reals stored row-major.
///
/// Scalars are represented with shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericError::InvalidShape(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericError::InvalidShape(shape));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1-D tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericError::InvalidShape(vec![rows.len(), cols]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// Standard matrix product of `[m, k]` by `[k, n]`.
///
/// Zero entries of `a` are skipped, so masked rows never read the
/// corresponding rows of `b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    let ((m, k), (k2, n)) = match (a.dims2(), b.dims2()) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(mismatch("matmul", a, b)),
    };
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix-vector product `[m, k] · [k] -> [m]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor, NumericError> {
    let (m, k) = w.dims2().ok_or_else(|| mismatch("matvec", w, x))?;
    if x.rank() != 1 || x.numel() != k {
        return Err(mismatch("matvec", w, x));
    }
    let out = (0..m)
        .map(|i| dot_slices(&w.data[i * k..(i + 1) * k], &x.data))
        .collect();
    Ok(Tensor::vector(out))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    // Fixed four-lane accumulation order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(a: &Tensor) -> Result<Tensor, NumericError> {
    let (m, n) = a.dims2().ok_or(NumericError::InvalidShape(a.shape.clone()))?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Pointwise binary op with exact-shape or scalar broadcasting.
pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericError> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else if b.is_scalar() {
        let y = b.data[0];
        Ok(map(a, |x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.data[0];
        Ok(map(b, |y| f(x, y)))
    } else {
        Err(mismatch(op, a, b))
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    zip_broadcast("hadamard", a, b, |x, y| x * y)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| if x > 0.0 { x } else { 0.0 })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    map(a, sigmoid_scalar)
}

pub fn tanh(a: &Tensor) -> Tensor {
    map(a, f64::tanh)
}

/// Row-wise softmax restricted to `mask`. 1-D inputs are a single row;
/// 2-D inputs take a row-major mask of the same size.
///
/// Masked positions are exactly zero and never read.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor, NumericError> {
    if mask.len() != logits.numel() || logits.rank() > 2 {
        return Err(NumericError::ShapeMismatch {
            op: "masked_softmax",
            left: logits.shape.clone(),
            right: vec![mask.len()],
        });
    }
    let cols = logits.shape[logits.rank() - 1];
    let mut out = vec![0.0; logits.numel()];
    for (r, (row, keep)) in logits
        .data
        .chunks(cols)
        .zip(mask.chunks(cols))
        .enumerate()
    {
        let max = row
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumericError::AllMasked);
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for ((o, v), k) in orow.iter_mut().zip(row).zip(keep) {
            if *k {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for (o, k) in orow.iter_mut().zip(keep) {
            if *k {
                *o /= total;
            }
        }
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Numerically stable log-softmax of a 1-D tensor.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor, NumericError> {
    if logits.rank() != 1 {
        return Err(NumericError::InvalidShape(logits.shape.clone()));
    }
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(map(logits, |v| v - lse))
}

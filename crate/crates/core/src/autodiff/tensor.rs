//! Dense row-major tensors of `f64` with rank at most two.

use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// A dense tensor. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds an `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::ShapeMismatch("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        matrix_dims(&self.shape).0
    }

    pub fn cols(&self) -> usize {
        matrix_dims(&self.shape).1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers the given rows into a new `[indices.len(), cols]` matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<(), AutodiffError> {
    if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
        return Err(AutodiffError::ShapeMismatch(format!(
            "unsupported shape {shape:?}: need rank 1 or 2 with positive extents"
        )));
    }
    Ok(())
}

/// Views a rank-1 shape `[c]` as the row vector `[1, c]`.
pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => unreachable!("tensor rank is validated at construction"),
    }
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Index into a (possibly broadcast) operand for output position `(i, j)`.
#[inline]
fn source_index(dims: (usize, usize), i: usize, j: usize) -> usize {
    let (r, c) = dims;
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    ii * c + jj
}

pub(crate) fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let (r, c) = matrix_dims(out_shape);
    let da = matrix_dims(&a.shape);
    let db = matrix_dims(&b.shape);
    let mut data = Vec::with_capacity(r * c);
    if a.shape == out_shape && b.shape == out_shape {
        data.extend(a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..r {
            for j in 0..c {
                data.push(f(
                    a.data[source_index(da, i, j)],
                    b.data[source_index(db, i, j)],
                ));
            }
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

pub(crate) fn broadcast_to(a: &Tensor, shape: &[usize]) -> Tensor {
    let (r, c) = matrix_dims(shape);
    let da = matrix_dims(&a.shape);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(a.data[source_index(da, i, j)]);
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Sums `a` down to `shape`, the inverse of [`broadcast_to`].
pub(crate) fn sum_to(a: &Tensor, shape: &[usize]) -> Tensor {
    let (r, c) = matrix_dims(&a.shape);
    let dt = matrix_dims(shape);
    let mut data = vec![0.0; dt.0 * dt.1];
    for i in 0..r {
        for j in 0..c {
            data[source_index(dt, i, j)] += a.data[i * c + j];
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = matrix_dims(&a.shape);
    let (_, m) = matrix_dims(&b.shape);
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let out = &mut data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data,
    }
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = matrix_dims(&a.shape);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let (r, c) = matrix_dims(&a.shape);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &a.data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Row-wise log-sum-exp, one value per row.
pub(crate) fn logsumexp_rows(a: &Tensor) -> Vec<f64> {
    let (r, c) = matrix_dims(&a.shape);
    (0..r)
        .map(|i| {
            let row = &a.data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

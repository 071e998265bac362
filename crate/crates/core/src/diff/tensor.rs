use serde::{Deserialize, Serialize};

use super::DiffError;

/// Dense row-major array of `f64` with explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DiffError> {
        let expected = checked_numel(&shape).ok_or_else(|| DiffError::Shape {
            op: "tensor",
            detail: format!("shape {shape:?} overflows"),
        })?;
        if shape.contains(&0) {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} has a zero extent"),
            });
        }
        if expected != values.len() {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], values: vec![value] }
    }

    /// Builds an `rows x cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self { shape: vec![1, values.len()], values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiffError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiffError::Shape { op: "from_rows", detail: "ragged rows".into() });
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of a 2-D tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values }
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s))
}

/// `c = a * b` for row-major matrices, with optional transposition of either operand.
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
    c: &mut [f64],
) {
    let (m, k) = if a_t { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if b_t { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: the slices cover m*k, k*n and m*n elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

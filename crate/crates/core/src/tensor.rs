use crate::error::{CoreError, Result};

/// Dense row-major f64 tensor. Every stored scalar is finite; constructors
/// and in-place updates reject NaN and infinity.
///
/// All differentiable operations in this crate work on rank-2 tensors, so the
/// convenience constructors produce `[rows, cols]` shapes: scalars are
/// `[1, 1]`, row vectors `[1, n]`, column vectors `[n, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, data, "tensor::new")
    }

    /// Construct with an operation name used in error reports.
    pub(crate) fn checked(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::DataLength {
                op,
                expected: 1,
                got: 0,
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CoreError::DataLength {
                op,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![v])
    }

    /// `[1, n]` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    /// `[n, 1]` column vector.
    pub fn col(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptyInput { what: "row list" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CoreError::ShapeMismatch {
                    op: "tensor::from_rows",
                    lhs: vec![1, cols],
                    rhs: vec![1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Result<Self> {
        Self::matrix(rows, cols, vec![v; rows * cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Single stored scalar; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Replace the stored data, keeping the shape. Finiteness is re-checked.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(CoreError::DataLength {
                op: "tensor::set_data",
                expected: self.data.len(),
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                op: "tensor::set_data",
            });
        }
        self.data = data;
        Ok(())
    }

    /// Mutate the data in place and re-check finiteness afterward.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        f(&mut self.data);
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                op: "tensor::update",
            });
        }
        Ok(())
    }

    pub(crate) fn data_mut_unchecked(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

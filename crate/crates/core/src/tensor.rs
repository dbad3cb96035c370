//! Dense row-major tensor storage shared by every numeric path.

use thiserror::Error;

/// Shape or argument violation raised by tensor constructors and kernels.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{op}: {detail}")]
    Mismatch { op: &'static str, detail: String },
    #[error("{0}")]
    Invalid(String),
}

impl ShapeError {
    pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Self {
        ShapeError::Mismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// N-dimensional array of `f64` values stored row-major, last axis fastest.
///
/// Every extent is at least one; the data length always equals the product
/// of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn element_count(shape: &[usize]) -> Result<usize, ShapeError> {
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(ShapeError::Invalid(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        n = n.checked_mul(e).ok_or_else(|| {
            ShapeError::Invalid(format!("shape {shape:?} overflows usize"))
        })?;
    }
    Ok(n)
}

impl Tensor {
    /// All-zero tensor. Panics on a zero extent; construction from untrusted
    /// shapes should go through [`Tensor::from_vec`].
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = element_count(shape).expect("tensor shape must have nonzero extents");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, ShapeError> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(ShapeError::Invalid(format!(
                "shape {shape:?} wants {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Reinterpret the same data under a new shape with an equal element count.
    pub fn into_shape(self, shape: Vec<usize>) -> Result<Tensor, ShapeError> {
        let n = element_count(&shape)?;
        if n != self.data.len() {
            return Err(ShapeError::Invalid(format!(
                "cannot reshape {} elements into {shape:?}",
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dims1(&self, op: &'static str) -> Result<usize, ShapeError> {
        match self.shape.as_slice() {
            &[n] => Ok(n),
            s => Err(ShapeError::mismatch(op, format!("expected rank 1, got {s:?}"))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2], ShapeError> {
        match self.shape.as_slice() {
            &[a, b] => Ok([a, b]),
            s => Err(ShapeError::mismatch(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4], ShapeError> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => Err(ShapeError::mismatch(op, format!("expected rank 4, got {s:?}"))),
        }
    }

    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5], ShapeError> {
        match self.shape.as_slice() {
            &[a, b, c, d, e] => Ok([a, b, c, d, e]),
            s => Err(ShapeError::mismatch(op, format!("expected rank 5, got {s:?}"))),
        }
    }
}

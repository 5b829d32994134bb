//! Row-major f64 arrays.

use serde::{Deserialize, Serialize};

use super::DiffError;

/// A dense row-major array of 64-bit floats.
///
/// Invariant: `shape.iter().product() == data.len()` and every shape
/// entry is positive. Arrays are immutable once built; mutation happens
/// only through the optimizer, which owns its parameters exclusively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArrayRepr", into = "ArrayRepr")]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<ArrayRepr> for Array {
    type Error = DiffError;
    fn try_from(r: ArrayRepr) -> Result<Self, DiffError> {
        Array::new(r.shape, r.data)
    }
}

impl From<Array> for ArrayRepr {
    fn from(a: Array) -> ArrayRepr {
        ArrayRepr {
            shape: a.shape,
            data: a.data,
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(DiffError::InvalidShape {
                op: "array",
                shape,
                reason: "dimensions must be positive",
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::BadArrayData {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Array::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar array.
    ///
    /// Panics when the array holds more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

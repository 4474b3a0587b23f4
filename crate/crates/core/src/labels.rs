//! Binary target matrices and prediction-score matrices, `n × classes`.

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMatrix {
    rows: usize,
    classes: usize,
    data: Vec<u8>,
}

impl TargetMatrix {
    pub fn new(rows: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(TensorError::Shape {
                op: "targets",
                left: vec![rows, classes],
                right: vec![data.len()],
            });
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(TensorError::Domain {
                op: "targets",
                detail: format!("label {bad} is not 0 or 1"),
            });
        }
        Ok(Self { rows, classes, data })
    }

    pub fn zeros(rows: usize, classes: usize) -> Self {
        Self {
            rows,
            classes,
            data: vec![0; rows * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(TensorError::Contract("ragged target rows".into()));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.classes + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.data[i * self.classes + j] = u8::from(on);
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn active_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn mean_cardinality(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.active_count() as f64 / self.rows as f64
        }
    }

    pub fn as_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.rows, self.classes], |k| T::lit(f64::from(self.data[k])))
    }

    /// Subset of rows in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.classes);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            classes: self.classes,
            data,
        }
    }
}

/// Prediction scores in `(0, 1)`, `n × classes`, kept in `f64` for
/// evaluation regardless of training precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(TensorError::Shape {
                op: "scores",
                left: vec![rows, classes],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, classes, data })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(TensorError::Shape {
                op: "scores",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn from_targets(targets: &TargetMatrix) -> Self {
        Self {
            rows: targets.rows(),
            classes: targets.classes(),
            data: targets.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Appends the rows of `other`.
    pub fn extend(&mut self, other: &ScoreMatrix) -> Result<()> {
        if other.classes != self.classes && self.rows > 0 {
            return Err(TensorError::Shape {
                op: "scores.extend",
                left: vec![self.rows, self.classes],
                right: vec![other.rows, other.classes],
            });
        }
        self.classes = other.classes;
        self.rows += other.rows;
        self.data.extend_from_slice(&other.data);
        Ok(())
    }
}

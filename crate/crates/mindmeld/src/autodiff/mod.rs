//! Minimal reverse-mode automatic differentiation.
//!
//! The engine records op-level nodes (matrix multiply, gate activations,
//! concatenation, ...) on a [`Graph`] as values are computed, then replays
//! the tape in reverse to accumulate gradients. Rank 0/1/2 tensors of `f64`
//! are all this crate needs: a batch of label windows is `[batch, len]`,
//! layer weights are `[in, out]`, and losses are scalars.

mod adam;
mod checkpoint;
mod dense;
mod graph;
mod lstm;

pub use adam::{adam_step, Adam, AdamState, ADAM_BETAS, ADAM_EPS};
pub use checkpoint::{Checkpoint, TensorBlob, CHECKPOINT_VERSION};
pub use dense::{forward_dense, Activation, BoundDense, DenseLayer, DenseParams};
pub use graph::{Graph, NodeId};
pub use lstm::{forward_lstm_bidirectional, BoundLstm, GateParams, LstmDirection, LstmParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("optimizer state does not match parameters: {0}")]
    OptimizerMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn shape_mismatch(op: &'static str, details: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, details }
}

/// Dense row-major tensor of `f64` values.
///
/// `grad` is populated by the optimizer path: after a backward pass the
/// training loop copies leaf gradients from the graph into the parameter
/// tensors, where [`Adam`] consumes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() {
            return Err(AutodiffError::InvalidTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let shape = vec![data.len()];
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret the tensor as a matrix: rank 1 is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rank-{} tensor where rank <= 2 expected", self.shape.len()),
        }
    }

    /// Zero the gradient buffer, allocating it on first use.
    pub fn zero_grad(&mut self) {
        match self.grad {
            Some(ref mut g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Add `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        debug_assert_eq!(buf.len(), g.len());
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    /// Split borrow for optimizer updates: gradient (read) and data (write).
    pub fn grad_and_data_mut(&mut self) -> (Option<&[f64]>, &mut [f64]) {
        (self.grad.as_deref(), &mut self.data)
    }
}

/// A parameter collection exposing its tensors in a stable order.
///
/// The order ties three things together: leaf ids handed out by a `bind`
/// call, gradient extraction after backward, and element-by-element probing
/// in finite-difference checks.
pub trait ParamTensors {
    fn param_tensors(&self) -> Vec<&Tensor>;
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamTensors for Vec<Tensor> {
    fn param_tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let got = Tensor::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(got, Err(AutodiffError::InvalidTensor { .. })));
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn rank_one_tensors_read_as_single_rows() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(v.dims2(), (1, 3));
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.dims2(), (2, 2));
    }

    #[test]
    fn gradients_accumulate_additively() {
        let mut t = Tensor::vector(vec![0.0, 0.0]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 1.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }
}

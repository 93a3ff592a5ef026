use rand::Rng;

use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Named parameter tensors in a fixed order. The order is part of the
/// checkpoint format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn lens(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::numel).collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every parameter on the tape, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<NodeId>, TensorError> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t.shape().to_vec(), t.data().to_vec())
                }
            })
            .collect()
    }

    /// Replaces parameter values in order, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Vec<f64>>) -> Result<(), TensorError> {
        if values.len() != self.tensors.len() {
            return Err(TensorError::LengthMismatch {
                expected: self.tensors.len(),
                actual: values.len(),
            });
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if v.len() != t.numel() {
                return Err(TensorError::LengthMismatch {
                    expected: t.numel(),
                    actual: v.len(),
                });
            }
            t.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }
}

/// Xavier-uniform matrix `[fan_in, fan_out]`, optionally scaled.
pub(crate) fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, scale: f64) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| scale * rng.random_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fan sizes")
}

pub(crate) fn filled(n: usize, value: f64) -> Tensor {
    Tensor::new(vec![n], vec![value; n]).expect("positive length")
}

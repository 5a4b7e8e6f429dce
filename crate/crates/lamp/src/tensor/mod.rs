//! Dense f32 tensors and a reverse-mode tape.
//!
//! The tape is rebuilt for every forward pass: leaves are pushed first
//! (parameters trainable, inputs not), ops append nodes, and `backward`
//! walks the nodes once in reverse. Node ids are handed out in creation
//! order, so the vector is already topologically sorted. All kernels are
//! single-threaded with a fixed accumulation order, which makes runs with
//! the same seed bit-identical.

mod optim;
mod sample;
mod store;
mod tape;

pub use optim::{clip_global_norm, cosine_lr, Adam};
pub use sample::{categorical_sample, entropy_of_logits, softmax_probs, Draw};
pub use store::{read_checkpoint, write_checkpoint};
pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Contiguous row-major f32 tensor. Rank is always at least 1; scalars are
/// shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} does not hold {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Uniform init over [lo, hi). Draws in row-major order.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension; the tensor is treated as `rows x row_width` by the
    /// row-indexed ops (gather, scatter, scale_rows).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn row_width(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

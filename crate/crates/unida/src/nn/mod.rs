//! Minimal batch neural-network stack: tensors, layers, optimizers and the
//! model contracts used by the adaptation pipeline (feature extractor,
//! classifier, domain discriminators, conditional generator, frozen style
//! network, frozen pre-trained model).
//!
//! Everything is `f64` and CPU-only. Convolutions lower to im2col + GEMM;
//! batch-level loops are data-parallel behind [`crate::exec::ExecMode`].

pub mod checksum;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod models;
pub mod ops;
pub mod optim;

use ndarray::{Array2, Array4, ArrayD};
use thiserror::Error;

pub use layers::{Layer, Sequential};
pub use models::{
    classify, pretrain_source_model, reverse_gradient, reverse_gradient_backward,
    style_activations, Classifier, DomainDiscriminator, FeatureExtractor, Generator, ModelBundle,
    PretrainedModel, StyleNetwork,
};

/// Errors surfaced by network construction and inference contracts.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("input resolution {got}x{got} does not match configured {want}x{want}")]
    ResolutionMismatch { want: usize, got: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("image size must be a positive multiple of 8, got {0}")]
    BadImageSize(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A learnable parameter array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Activations flowing between layers: feature matrices `(batch, dim)` or
/// image-like maps `(batch, channels, height, width)`.
#[derive(Clone, Debug)]
pub enum Tensor {
    D2(Array2<f64>),
    D4(Array4<f64>),
}

impl Tensor {
    pub fn batch_len(&self) -> usize {
        match self {
            Tensor::D2(a) => a.nrows(),
            Tensor::D4(a) => a.shape()[0],
        }
    }

    pub fn as_d2(&self) -> &Array2<f64> {
        match self {
            Tensor::D2(a) => a,
            Tensor::D4(_) => panic!("expected rank-2 tensor, got rank-4"),
        }
    }

    pub fn as_d4(&self) -> &Array4<f64> {
        match self {
            Tensor::D4(a) => a,
            Tensor::D2(_) => panic!("expected rank-4 tensor, got rank-2"),
        }
    }

    pub fn into_d2(self) -> Array2<f64> {
        match self {
            Tensor::D2(a) => a,
            Tensor::D4(_) => panic!("expected rank-2 tensor, got rank-4"),
        }
    }

    pub fn into_d4(self) -> Array4<f64> {
        match self {
            Tensor::D4(a) => a,
            Tensor::D2(_) => panic!("expected rank-4 tensor, got rank-2"),
        }
    }
}

impl From<Array2<f64>> for Tensor {
    fn from(a: Array2<f64>) -> Self {
        Tensor::D2(a)
    }
}

impl From<Array4<f64>> for Tensor {
    fn from(a: Array4<f64>) -> Self {
        Tensor::D4(a)
    }
}

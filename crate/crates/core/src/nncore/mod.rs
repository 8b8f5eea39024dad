//! Convolutional network building blocks implemented from scratch.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for gradient checking.

mod gradcheck;
pub mod layers;
mod model;
mod spec;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_model, GradCheckError, GradCheckReport};
pub use layers::DropoutMode;
pub use model::{ForwardCache, ForwardMode, Gradients, Model};
pub use spec::{ConvSpec, InitConfig, LayerSpec, LrnSpec, ModelSpec, PoolSpec};
pub use tensor::Tensor;

/// Floating point element type of tensors.
pub trait Scalar:
    num_traits::Float + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = op(a) · op(b) + beta · c` over row-major buffers, where `op(a)` is
    /// `m × k` and `op(b)` is `k × n`; `trans_*` means the buffer holds the
    /// transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
                let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
                let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
                // SAFETY: the assertion above keeps every strided access in bounds.
                unsafe {
                    $kernel(
                        m, k, n, 1.0,
                        a.as_ptr(), rsa as isize, csa as isize,
                        b.as_ptr(), rsb as isize, csb as isize,
                        beta, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Origin tag of layers that were freshly initialized rather than copied.
pub const RANDOM_ORIGIN: &str = "random";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{what}: expected {expected}, found shape {found:?}")]
    Mismatch {
        what: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("layer {index} ({kind}) cannot take input {input:?}: {reason}")]
    LayerInput {
        index: usize,
        kind: &'static str,
        input: Vec<usize>,
        reason: String,
    },
    #[error("layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad architecture descriptor: {0}")]
    Descriptor(String),
    #[error("weight layer {layer}: {reason}")]
    Parameter { layer: usize, reason: String },
}

/// Parameters and bookkeeping of one weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    /// Frozen layers never change under an optimizer step.
    pub frozen: bool,
    /// Dataset the weights were trained on, or [`RANDOM_ORIGIN`].
    pub origin: String,
}

impl<T: Scalar> LayerState<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        LayerState {
            weights,
            bias,
            frozen: false,
            origin: RANDOM_ORIGIN.to_string(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerState<U> {
        LayerState {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            frozen: self.frozen,
            origin: self.origin.clone(),
        }
    }
}

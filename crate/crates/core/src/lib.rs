//! Cross-tokenizer knowledge distillation workbench: a small autodiff core,
//! byte-pair tokenizers, chunk alignment, toy decoders and the dual-space
//! objectives with their query/key regularizers.

pub mod align;
pub mod cma;
pub mod config;
pub mod data;
pub mod div;
pub mod harness;
pub mod io;
pub mod kq;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod rouge;
pub mod scalar;
pub mod tensor;
pub mod tok;

pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Linear64 = nn::Linear<f64>;
pub type Model64 = lm::ModelState<f64>;
pub type Projectors64 = cma::Projectors<f64>;
pub type Adam64 = optim::Adam<f64>;

//! Small building blocks shared by the language models, projectors and
//! adversaries.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

/// Gaussian-initialized tensor; trainable unless `frozen`.
pub fn normal_init<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64, frozen: bool) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data: Vec<T> = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    leaf(data, shape, frozen)
}

pub fn constant_init<T: Scalar>(shape: &[usize], value: f64, frozen: bool) -> Tensor<T> {
    let n: usize = shape.iter().product();
    leaf(vec![T::lit(value); n], shape, frozen)
}

fn leaf<T: Scalar>(data: Vec<T>, shape: &[usize], frozen: bool) -> Tensor<T> {
    let t = if frozen {
        Tensor::new(data, shape)
    } else {
        Tensor::param(data, shape)
    };
    t.expect("initializer shapes are valid")
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights `~ N(0, std²)`, zero bias.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64, frozen: bool) -> Self {
        Linear {
            weight: normal_init(rng, &[fan_in, fan_out], std, frozen),
            bias: constant_init(&[1, fan_out], 0.0, frozen),
        }
    }

    /// Weights `~ N(0, 1/fan_in)`, zero bias.
    pub fn fan_in(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self::new(rng, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), false)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.affine(&self.weight, &self.bias)
    }

    /// Same map using constant copies of the weights (no gradient reaches them).
    pub fn forward_detached(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.affine(&self.weight.detach(), &self.bias.detach())
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Order-sensitive FNV-1a digest of parameter bit patterns.
pub fn checksum<T: Scalar>(params: &[Tensor<T>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for &v in p.data().iter() {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

//! Adam with bias correction, no weight decay, constant learning rate.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    params: Vec<Tensor<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the accumulated gradients; parameters without a
    /// gradient are treated as having gradient zero.
    pub fn step(&mut self) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().unwrap_or_else(|| vec![T::zero(); m.len()]);
            p.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }
}

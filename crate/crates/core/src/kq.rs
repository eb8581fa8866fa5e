//! Key-query distribution matching: an adversarial discriminator (GA) or a
//! conditional-transport critic (CT) pulls the student's queries toward the
//! distribution of the teacher's keys.
//!
//! Every loss comes in two flavours built on separate graphs: the adversary
//! loss sees constant queries, the generator loss sees a constant adversary.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const DISC_HIDDEN: usize = 64;
pub const CRITIC_HIDDEN: usize = 32;
pub const CRITIC_FEATURES: usize = 32;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Discriminator logits are clamped to `±LOGIT_CLAMP` before the sigmoid.
pub const LOGIT_CLAMP: f64 = 20.0;
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum KqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("key-query matching needs at least one key and one query")]
    EmptyBatch,
    #[error("kq weight must be finite and non-negative, got {0}")]
    BadWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KqKind {
    #[default]
    None,
    Ga,
    Ct,
}

impl KqKind {
    pub fn name(self) -> &'static str {
        match self {
            KqKind::None => "none",
            KqKind::Ga => "ga",
            KqKind::Ct => "ct",
        }
    }
}

impl fmt::Display for KqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KqKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(KqKind::None),
            "ga" => Ok(KqKind::Ga),
            "ct" => Ok(KqKind::Ct),
            other => Err(format!("unknown kq mode '{other}' (expected none|ga|ct)")),
        }
    }
}

/// Which side the discriminator labels as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RealClass {
    #[default]
    Queries,
    Keys,
}

impl RealClass {
    pub fn name(self) -> &'static str {
        match self {
            RealClass::Queries => "queries",
            RealClass::Keys => "keys",
        }
    }
}

impl FromStr for RealClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "queries" => Ok(RealClass::Queries),
            "keys" => Ok(RealClass::Keys),
            other => Err(format!("unknown real class '{other}' (expected queries|keys)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KqMode {
    pub kind: KqKind,
    pub weight: f64,
}

impl KqMode {
    pub fn new(kind: KqKind, weight: f64) -> Result<Self, KqError> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(KqError::BadWeight(weight));
        }
        Ok(KqMode { kind, weight })
    }

    pub fn none() -> Self {
        KqMode {
            kind: KqKind::None,
            weight: 1.0,
        }
    }
}

/// `ℝ^{2d_t} → 64 → 1` perceptron with a leaky ramp and a clamped sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(rng: &mut impl Rng, input_dim: usize) -> Self {
        Discriminator {
            hidden: Linear::fan_in(rng, input_dim, DISC_HIDDEN),
            out: Linear::fan_in(rng, DISC_HIDDEN, 1),
        }
    }

    /// `D(x)` per row as an `n×1` tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let h = self.hidden.forward(x)?.leaky_relu(T::lit(LEAKY_SLOPE));
        Ok(squash(&self.out.forward(&h)?))
    }

    /// `D(x)` with constant weights.
    pub fn forward_frozen(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let h = self.hidden.forward_detached(x)?.leaky_relu(T::lit(LEAKY_SLOPE));
        Ok(squash(&self.out.forward_detached(&h)?))
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

fn squash<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = T::lit(LOGIT_CLAMP);
    logits.clamp(-c, c).sigmoid()
}

fn neg_mean_log<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.clamp_min(T::lit(LOG_CLAMP)).log().mean().scale(-T::one())
}

fn one_minus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.scale(-T::one()).add_scalar(T::one())
}

/// Stacks per-example key or query rows into one pool.
pub fn pool_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, KqError> {
    let (first, rest) = parts.split_first().ok_or(KqError::EmptyBatch)?;
    let mut pool = first.clone();
    for p in rest {
        pool = pool.concat_rows(p)?;
    }
    Ok(pool)
}

/// Adversary and generator losses of one GA step.
#[derive(Debug, Clone)]
pub struct AdversarialLosses<T: Scalar> {
    /// Trains the adversary; queries and keys are constants here.
    pub adversary: Tensor<T>,
    /// Trains the query projector; adversary weights are constants here.
    pub generator: Tensor<T>,
}

/// With queries as the positive class:
/// `d_loss = −mean log D(q) − mean log(1 − D(k))` and
/// `g_loss = −mean log(1 − D(q))`. Keys as the positive class swap the roles
/// of `D` and `1 − D`.
pub fn ga_losses<T: Scalar>(
    keys: &Tensor<T>,
    queries: &Tensor<T>,
    disc: &Discriminator<T>,
    real: RealClass,
) -> Result<AdversarialLosses<T>, KqError> {
    keys.dims2()?;
    queries.dims2()?;
    let keys = keys.detach();
    let d_q = disc.forward(&queries.detach())?;
    let d_k = disc.forward(&keys)?;
    let g_q = disc.forward_frozen(queries)?;
    let (adversary, generator) = match real {
        RealClass::Queries => (
            neg_mean_log(&d_q).add(&neg_mean_log(&one_minus(&d_k)))?,
            neg_mean_log(&one_minus(&g_q)),
        ),
        RealClass::Keys => (
            neg_mean_log(&d_k).add(&neg_mean_log(&one_minus(&d_q)))?,
            neg_mean_log(&g_q),
        ),
    };
    Ok(AdversarialLosses { adversary, generator })
}

/// Fraction of rows the discriminator classifies correctly at threshold ½.
pub fn discriminator_accuracy<T: Scalar>(
    keys: &Tensor<T>,
    queries: &Tensor<T>,
    disc: &Discriminator<T>,
    real: RealClass,
) -> Result<f64, KqError> {
    keys.dims2()?;
    queries.dims2()?;
    let d_k = disc.forward_frozen(&keys.detach())?.to_vec();
    let d_q = disc.forward_frozen(&queries.detach())?.to_vec();
    let (pos, neg) = match real {
        RealClass::Queries => (d_q, d_k),
        RealClass::Keys => (d_k, d_q),
    };
    let half = T::lit(0.5);
    let correct = pos.iter().filter(|&&v| v > half).count() + neg.iter().filter(|&&v| v <= half).count();
    Ok(correct as f64 / (pos.len() + neg.len()) as f64)
}

/// Feature map `φ: ℝ^{2d_t} → 32 → ℝ^{32}`.
#[derive(Debug, Clone)]
pub struct Critic<T: Scalar> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn new(rng: &mut impl Rng, input_dim: usize) -> Self {
        Critic {
            hidden: Linear::fan_in(rng, input_dim, CRITIC_HIDDEN),
            out: Linear::fan_in(rng, CRITIC_HIDDEN, CRITIC_FEATURES),
        }
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let h = self.hidden.forward(x)?.leaky_relu(T::lit(LEAKY_SLOPE));
        self.out.forward(&h)
    }

    pub fn features_frozen(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let h = self.hidden.forward_detached(x)?.leaky_relu(T::lit(LEAKY_SLOPE));
        self.out.forward_detached(&h)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// Transport plans and cost for one set of critic features.
#[derive(Debug, Clone)]
pub struct Transport<T: Scalar> {
    /// `c(k, q) = 1 − cos(φ(k), φ(q))`, laid out `n_q × n_k`.
    pub cost: Tensor<T>,
    /// Row `q`: weights over keys.
    pub forward_plan: Tensor<T>,
    /// Row `k`: weights over queries.
    pub backward_plan: Tensor<T>,
    /// `½·mean_q Σ_k w(k|q)·c + ½·mean_k Σ_q w(q|k)·c`.
    pub cost_total: Tensor<T>,
}

/// Bidirectional conditional transport between query and key features.
pub fn transport<T: Scalar>(phi_k: &Tensor<T>, phi_q: &Tensor<T>) -> Result<Transport<T>, TensorError> {
    let sim = phi_q.matmul(&phi_k.transpose()?)?;
    let cos = phi_q.l2_normalize_rows()?.matmul(&phi_k.l2_normalize_rows()?.transpose()?)?;
    let cost = one_minus(&cos);
    let forward_plan = sim.softmax_rows(None)?;
    let backward_plan = sim.transpose()?.softmax_rows(None)?;
    let half = T::lit(0.5);
    let fwd = forward_plan.mul(&cost)?.sum_rows()?.mean();
    let bwd = backward_plan.mul(&cost.transpose()?)?.sum_rows()?.mean();
    let cost_total = fwd.add(&bwd)?.scale(half);
    Ok(Transport {
        cost,
        forward_plan,
        backward_plan,
        cost_total,
    })
}

/// Critic loss `−T` (queries constant) and generator loss `T` (critic constant).
pub fn ct_losses<T: Scalar>(keys: &Tensor<T>, queries: &Tensor<T>, critic: &Critic<T>) -> Result<AdversarialLosses<T>, KqError> {
    keys.dims2()?;
    queries.dims2()?;
    let keys = keys.detach();
    let adv = transport(&critic.features(&keys)?, &critic.features(&queries.detach())?)?;
    let gen = transport(&critic.features_frozen(&keys)?, &critic.features_frozen(queries)?)?;
    Ok(AdversarialLosses {
        adversary: adv.cost_total.scale(-T::one()),
        generator: gen.cost_total,
    })
}

/// `dskd_total + weight · kq_generator`.
pub fn combine<T: Scalar>(dskd_total: &Tensor<T>, kq_generator: &Tensor<T>, mode: &KqMode) -> Result<Tensor<T>, TensorError> {
    dskd_total.add(&kq_generator.scale(T::lit(mode.weight)))
}

//! Row-wise divergences between prediction and target distributions.
//!
//! With `D = Σ_v` over the vocabulary and `p` the first argument:
//!
//! | kind | per-row value |
//! | ---- | ------------- |
//! | KL   | `Σ p·log(p/q)` |
//! | RKL  | `KL(q‖p)` |
//! | SKL  | `KL(p‖λp + (1−λ)q)` |
//! | SRKL | `KL(q‖λq + (1−λ)p)` |
//! | JSD  | `½KL(p‖m) + ½KL(q‖m)`, `m = (p+q)/2` |
//! | AKL  | `α·KL(p‖q) + (1−α)·KL(q‖p)` |
//!
//! AKL's `α = G_head / (G_head + G_tail)` with `G = Σ|p−q|` over the head
//! (the fewest entries of largest `p` whose mass reaches `μ`) and the tail
//! (everything else); `α = ½` when both gaps vanish. This is a gap-weighted
//! blend in the spirit of adaptive KL, not a verbatim port of any reference
//! implementation. Logs clamp their argument at `1e-12`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const LOG_CLAMP: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DivError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("row {row} of {side} sums to {sum}, not 1")]
    NotNormalized { side: &'static str, row: usize, sum: f64 },
    #[error("divergence mask selects no rows")]
    EmptyMask,
    #[error("{0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    Kl,
    Rkl,
    Skl,
    Srkl,
    Akl,
    Jsd,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 6] = [
        DivergenceKind::Kl,
        DivergenceKind::Rkl,
        DivergenceKind::Skl,
        DivergenceKind::Srkl,
        DivergenceKind::Akl,
        DivergenceKind::Jsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Rkl => "rkl",
            DivergenceKind::Skl => "skl",
            DivergenceKind::Srkl => "srkl",
            DivergenceKind::Akl => "akl",
            DivergenceKind::Jsd => "jsd",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DivergenceKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown divergence '{s}' (expected kl|rkl|skl|srkl|akl|jsd)"))
    }
}

/// A divergence kind with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub kind: DivergenceKind,
    /// Skew for SKL/SRKL, in `(0, 1)`.
    pub skew_lambda: f64,
    /// Head mass for AKL, in `(0, 1)`.
    pub akl_mu: f64,
}

impl Divergence {
    pub fn new(kind: DivergenceKind) -> Self {
        Divergence {
            kind,
            skew_lambda: 0.1,
            akl_mu: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), DivError> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.skew_lambda) {
            return Err(DivError::BadParameter(format!("skew_lambda {} not in (0,1)", self.skew_lambda)));
        }
        if !in_unit(self.akl_mu) {
            return Err(DivError::BadParameter(format!("akl_mu {} not in (0,1)", self.akl_mu)));
        }
        Ok(())
    }

    /// Mean over masked rows of the per-row divergence of `p` from `q`.
    ///
    /// Both inputs are `n×V` distributions; gradients reach whichever of them
    /// tracks gradients (callers detach targets themselves).
    pub fn compute<T: Scalar>(&self, p: &Tensor<T>, q: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>, DivError> {
        self.validate()?;
        if p.shape() != q.shape() {
            return Err(TensorError::Shape {
                op: "divergence",
                lhs: p.shape().to_vec(),
                rhs: q.shape().to_vec(),
            }
            .into());
        }
        let (n, _) = p.dims2()?;
        if mask.len() != n {
            return Err(TensorError::contract("divergence", format!("mask has {} rows for {n}", mask.len())).into());
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(DivError::EmptyMask);
        }
        check_normalized("p", p, &rows)?;
        check_normalized("q", q, &rows)?;
        let p = p.gather_rows(&rows)?;
        let q = q.gather_rows(&rows)?;
        Ok(self.per_row(&p, &q)?.mean())
    }

    /// Per-row divergence as an `n×1` tensor, no masking or validation.
    pub fn per_row<T: Scalar>(&self, p: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let lambda = T::lit(self.skew_lambda);
        let one_minus = T::one() - lambda;
        match self.kind {
            DivergenceKind::Kl => kl_rows(p, q),
            DivergenceKind::Rkl => kl_rows(q, p),
            DivergenceKind::Skl => kl_rows(p, &p.scale(lambda).add(&q.scale(one_minus))?),
            DivergenceKind::Srkl => kl_rows(q, &q.scale(lambda).add(&p.scale(one_minus))?),
            DivergenceKind::Jsd => {
                let half = T::lit(0.5);
                let m = p.add(q)?.scale(half);
                Ok(kl_rows(p, &m)?.add(&kl_rows(q, &m)?)?.scale(half))
            }
            DivergenceKind::Akl => {
                let alpha = akl_alpha(p, q, self.akl_mu)?;
                let beta = alpha.scale(-T::one()).add_scalar(T::one());
                alpha.mul(&kl_rows(p, q)?)?.add(&beta.mul(&kl_rows(q, p)?)?)
            }
        }
    }
}

fn check_normalized<T: Scalar>(side: &'static str, t: &Tensor<T>, rows: &[usize]) -> Result<(), DivError> {
    for &r in rows {
        let sum: f64 = t.row(r).iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || !sum.is_finite() {
            return Err(DivError::NotNormalized { side, row: r, sum });
        }
    }
    Ok(())
}

/// `Σ_v a·(log a − log b)` per row, logs clamped.
pub fn kl_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let eps = T::lit(LOG_CLAMP);
    let log_ratio = a.clamp_min(eps).log().sub(&b.clamp_min(eps).log())?;
    a.mul(&log_ratio)?.sum_rows()
}

/// Indicator of each row's head: the fewest largest-`p` entries (ties by
/// lower index) whose cumulative mass reaches `mu`.
pub fn head_mask<T: Scalar>(p: &Tensor<T>, mu: f64) -> Result<Vec<bool>, TensorError> {
    let (n, v) = p.dims2()?;
    let data = p.data();
    let mut mask = vec![false; n * v];
    for i in 0..n {
        let row = &data[i * v..(i + 1) * v];
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let mut mass = 0.0;
        for j in order {
            mask[i * v + j] = true;
            mass += row[j].as_f64();
            if mass >= mu {
                break;
            }
        }
    }
    Ok(mask)
}

/// Per-row AKL blend weight `α` as an `n×1` tensor (differentiable through
/// the gaps; the head/tail split itself is piecewise constant).
pub fn akl_alpha<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>, mu: f64) -> Result<Tensor<T>, TensorError> {
    let (n, v) = p.dims2()?;
    let head = head_mask(p, mu)?;
    let to_t = |b: bool| if b { T::one() } else { T::zero() };
    let head_t = Tensor::new(head.iter().map(|&b| to_t(b)).collect(), &[n, v])?;
    let tail_t = Tensor::new(head.iter().map(|&b| to_t(!b)).collect(), &[n, v])?;
    let gap = p.sub(q)?.abs();
    let g_head = gap.mul(&head_t)?.sum_rows()?;
    let g_tail = gap.mul(&tail_t)?.sum_rows()?;
    let denom = g_head.add(&g_tail)?;
    // rows with no gap at all get α = ½
    let flat: Vec<T> = denom.data().iter().map(|&d| to_t(d == T::zero())).collect();
    let flat = Tensor::new(flat, &[n, 1])?;
    g_head.add(&flat.scale(T::lit(0.5)))?.div(&denom.add(&flat)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dist(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Tensor<f64> {
        let logits: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Tensor::new(logits, &[n, v]).unwrap().softmax_rows(None).unwrap()
    }

    #[test]
    fn zero_at_identity_for_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_dist(&mut rng, 3, 7);
        for kind in DivergenceKind::ALL {
            let d = Divergence::new(kind).compute(&p, &p, &[true; 3]).unwrap().item();
            assert!(d.abs() < 1e-12, "{kind}: {d}");
        }
    }

    #[test]
    fn kl_analytic_value() {
        let p = dist(&[vec![1.0, 0.0]]);
        let q = dist(&[vec![0.5, 0.5]]);
        let d = Divergence::new(DivergenceKind::Kl).compute(&p, &q, &[true]).unwrap().item();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let p = dist(&[vec![0.7, 0.7]]);
        let q = dist(&[vec![0.5, 0.5]]);
        let err = Divergence::new(DivergenceKind::Kl).compute(&p, &q, &[true]).unwrap_err();
        assert!(matches!(err, DivError::NotNormalized { side: "p", row: 0, .. }));
    }

    #[test]
    fn masked_rows_are_ignored() {
        let p = dist(&[vec![1.0, 0.0], vec![0.3, 0.3]]);
        let q = dist(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let d = Divergence::new(DivergenceKind::Kl).compute(&p, &q, &[true, false]).unwrap().item();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(
            Divergence::new(DivergenceKind::Kl).compute(&p, &q, &[false, false]).unwrap_err(),
            DivError::EmptyMask
        );
    }

    #[test]
    fn parameters_validated() {
        let mut d = Divergence::new(DivergenceKind::Skl);
        d.skew_lambda = 1.0;
        assert!(d.validate().is_err());
        d.skew_lambda = 0.5;
        d.akl_mu = 0.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn head_reaches_mu() {
        let p = dist(&[vec![0.1, 0.45, 0.3, 0.15]]);
        // descending: 0.45 (0.45 < 0.5), then 0.3 reaches 0.75
        assert_eq!(head_mask(&p, 0.5).unwrap(), vec![false, true, true, false]);
    }

    #[test]
    fn akl_alpha_in_unit_interval_and_half_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = random_dist(&mut rng, 2, 5);
            let q = random_dist(&mut rng, 2, 5);
            for a in akl_alpha(&p, &q, 0.5).unwrap().to_vec() {
                assert!((0.0..=1.0).contains(&a));
            }
            assert_eq!(akl_alpha(&p, &p, 0.5).unwrap().to_vec(), vec![0.5, 0.5]);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("SRKL".parse::<DivergenceKind>().unwrap(), DivergenceKind::Srkl);
        assert!("hellinger".parse::<DivergenceKind>().is_err());
    }
}

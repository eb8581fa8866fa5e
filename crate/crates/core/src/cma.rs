//! Cross-model attention between student queries and teacher keys, the
//! chunk-level ablations, and the dual-space distillation losses.
//!
//! Shapes, with `n_s`/`n_t` the sequence lengths and `d_s`/`d_t` the hidden
//! sizes:
//!
//! ```text
//! Q      = P_Q([e_in^s, e_tgt^s])                      n_s × 2d_t
//! K      = N_std([e_in^t, e_tgt^t])                    n_t × 2d_t
//! A_t2s  = softmax(Q·Kᵀ / √(2d_t))                     n_s × n_t
//! A_s2t  = softmax(K·Qᵀ / √(2d_t))                     n_t × n_s
//! V_s2t  = P_s2t(h^s)                                  n_s × d_t
//! V_t2s  = P_t2s(N_std(h^t) + N_std(e_tgt^t))          n_t × d_s
//! h_t2s  = A_t2s·V_t2s,  h_s2t = A_s2t·V_s2t
//! q_t2s  = softmax(h_t2s·W^s),  q_s2t = softmax(h_s2t·W^t)
//! ```
//!
//! `N_std` divides each row by its population standard deviation without
//! centering. Chunk-level projection replaces the attention weights by a
//! uniform distribution over each row's aligned tokens; chunk-level
//! attention keeps the learned logits but gives zero weight outside the
//! aligned chunk rectangles. Both use `-∞` masking rather than multiplying
//! the matrix or the logits by the 0/1 alignment.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::align::{AlignmentMatrix, BinaryMatrix};
use crate::div::{DivError, Divergence};
use crate::lm::{ce_loss, ForwardOutput, LmError};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum CmaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Divergence(#[from] DivError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("{0} mode requires an alignment matrix")]
    MissingAlignment(AlignmentMode),
    #[error("dimension mismatch: {0}")]
    Dims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentMode {
    /// Learned cross-model attention.
    Cma,
    /// Uniform projection within aligned chunks.
    Clp,
    /// Attention restricted to aligned chunks.
    Cla,
}

impl AlignmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AlignmentMode::Cma => "cma",
            AlignmentMode::Clp => "clp",
            AlignmentMode::Cla => "cla",
        }
    }

    pub fn needs_alignment(self) -> bool {
        !matches!(self, AlignmentMode::Cma)
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignmentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cma" => Ok(AlignmentMode::Cma),
            "clp" => Ok(AlignmentMode::Clp),
            "cla" => Ok(AlignmentMode::Cla),
            other => Err(format!("unknown alignment mode '{other}' (expected cma|clp|cla)")),
        }
    }
}

/// The three trainable projectors.
#[derive(Debug, Clone)]
pub struct Projectors<T: Scalar> {
    /// `2d_s → 2d_t`, builds the queries.
    pub query: Linear<T>,
    /// `d_s → d_t`, student hidden states into teacher space.
    pub s2t: Linear<T>,
    /// `d_t → d_s`, teacher hidden states into student space.
    pub t2s: Linear<T>,
}

impl<T: Scalar> Projectors<T> {
    /// Weights `~ N(0, 1/fan_in)`, zero biases.
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projectors {
            query: Linear::fan_in(&mut rng, 2 * student_dim, 2 * teacher_dim),
            s2t: Linear::fan_in(&mut rng, student_dim, teacher_dim),
            t2s: Linear::fan_in(&mut rng, teacher_dim, student_dim),
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = self.query.params();
        p.extend(self.s2t.params());
        p.extend(self.t2s.params());
        p
    }

    pub fn student_dim(&self) -> usize {
        self.s2t.in_dim()
    }

    pub fn teacher_dim(&self) -> usize {
        self.s2t.out_dim()
    }
}

/// Queries from the student embeddings and keys from the teacher embeddings.
///
/// Student embeddings enter as constants so the query projector is the only
/// trainable path; keys carry no gradient at all.
pub fn build_qk<T: Scalar>(
    student: &ForwardOutput<T>,
    teacher: &ForwardOutput<T>,
    proj: &Projectors<T>,
) -> Result<(Tensor<T>, Tensor<T>), CmaError> {
    let (_, ds) = student.input_embeds.dims2()?;
    let (_, dt) = teacher.input_embeds.dims2()?;
    if ds != proj.student_dim() || dt != proj.teacher_dim() {
        return Err(CmaError::Dims(format!(
            "embeddings are d_s={ds}, d_t={dt} but projectors expect d_s={}, d_t={}",
            proj.student_dim(),
            proj.teacher_dim()
        )));
    }
    let s_emb = student.input_embeds.detach().concat_cols(&student.target_embeds.detach())?;
    let q = proj.query.forward(&s_emb)?;
    let k = teacher
        .input_embeds
        .concat_cols(&teacher.target_embeds)?
        .std_normalize_rows()?
        .detach();
    Ok((q, k))
}

/// Validity flags per position; `None` means every position is real.
#[derive(Debug, Clone, Copy, Default)]
pub struct PadMasks<'a> {
    pub student: Option<&'a [bool]>,
    pub teacher: Option<&'a [bool]>,
}

/// Attention weights in both directions.
#[derive(Debug, Clone)]
pub struct Attention<T: Scalar> {
    /// `n_s × n_t`.
    pub t2s: Tensor<T>,
    /// `n_t × n_s`.
    pub s2t: Tensor<T>,
    /// Rows that had no admissible entry and fell back to uniform weights.
    pub fallback_rows: usize,
}

fn admissible(rows: usize, cols: usize, row_valid: Option<&[bool]>, col_valid: Option<&[bool]>, chunk: Option<&BinaryMatrix>) -> Vec<bool> {
    let mut m = vec![false; rows * cols];
    for r in 0..rows {
        if !row_valid.map_or(true, |v| v[r]) {
            continue;
        }
        for c in 0..cols {
            m[r * cols + c] = col_valid.map_or(true, |v| v[c]) && chunk.map_or(true, |ch| ch.get(r, c));
        }
    }
    m
}

/// Softmax under `mask`; real rows left without admissible entries get
/// uniform weight over their valid columns.
fn guarded_softmax<T: Scalar>(
    logits: &Tensor<T>,
    mask: &[bool],
    row_valid: Option<&[bool]>,
    col_valid: Option<&[bool]>,
) -> Result<(Tensor<T>, usize), CmaError> {
    let (rows, cols) = logits.dims2()?;
    let (probs, degenerate) = logits.softmax_rows_flagged(Some(mask))?;
    let broken: Vec<usize> = degenerate
        .into_iter()
        .filter(|&r| row_valid.map_or(true, |v| v[r]))
        .collect();
    if broken.is_empty() {
        return Ok((probs, 0));
    }
    warn!("{} attention rows had no admissible entry; using uniform fallback", broken.len());
    let n_valid = col_valid.map_or(cols, |v| v.iter().filter(|&&b| b).count()).max(1);
    let w = T::lit(1.0 / n_valid as f64);
    let mut fill = vec![T::zero(); rows * cols];
    for &r in &broken {
        for c in 0..cols {
            if col_valid.map_or(true, |v| v[c]) {
                fill[r * cols + c] = w;
            }
        }
    }
    let probs = probs.add(&Tensor::new(fill, &[rows, cols])?)?;
    Ok((probs, broken.len()))
}

fn check_alignment_dims(m: &AlignmentMatrix, n_s: usize, n_t: usize) -> Result<(), CmaError> {
    if m.m_t2s.rows != n_s || m.m_t2s.cols != n_t {
        return Err(CmaError::Dims(format!(
            "alignment is {}×{} but sequences are n_s={n_s}, n_t={n_t}",
            m.m_t2s.rows, m.m_t2s.cols
        )));
    }
    Ok(())
}

/// Scaled dot-product attention between queries and keys, in both
/// directions. Chunk-level attention additionally excludes everything
/// outside the aligned rectangles.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    mode: AlignmentMode,
    alignment: Option<&AlignmentMatrix>,
    pads: PadMasks<'_>,
) -> Result<Attention<T>, CmaError> {
    let (n_s, width) = q.dims2()?;
    let (n_t, kw) = k.dims2()?;
    if width != kw {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }
        .into());
    }
    let (chunk_t2s, chunk_s2t) = match (mode, alignment) {
        (AlignmentMode::Cla, None) => return Err(CmaError::MissingAlignment(mode)),
        (AlignmentMode::Cla, Some(m)) => {
            check_alignment_dims(m, n_s, n_t)?;
            (Some(&m.m_t2s), Some(&m.m_s2t))
        }
        _ => (None, None),
    };
    let scale = T::lit(1.0 / (width as f64).sqrt());
    let logits = q.matmul(&k.transpose()?)?.scale(scale);
    let mask_t2s = admissible(n_s, n_t, pads.student, pads.teacher, chunk_t2s);
    let mask_s2t = admissible(n_t, n_s, pads.teacher, pads.student, chunk_s2t);
    let (t2s, f1) = guarded_softmax(&logits, &mask_t2s, pads.student, pads.teacher)?;
    let (s2t, f2) = guarded_softmax(&logits.transpose()?, &mask_s2t, pads.teacher, pads.student)?;
    Ok(Attention {
        t2s,
        s2t,
        fallback_rows: f1 + f2,
    })
}

/// Uniform weights over each row's aligned tokens (softmax of the
/// alignment under its own admissibility mask). Constant tensors.
pub fn chunk_projection<T: Scalar>(alignment: &AlignmentMatrix, pads: PadMasks<'_>) -> Result<Attention<T>, CmaError> {
    let (n_s, n_t) = (alignment.m_t2s.rows, alignment.m_t2s.cols);
    let zeros_t2s = Tensor::<T>::zeros(&[n_s, n_t])?;
    let zeros_s2t = Tensor::<T>::zeros(&[n_t, n_s])?;
    let mask_t2s = admissible(n_s, n_t, pads.student, pads.teacher, Some(&alignment.m_t2s));
    let mask_s2t = admissible(n_t, n_s, pads.teacher, pads.student, Some(&alignment.m_s2t));
    let (t2s, f1) = guarded_softmax(&zeros_t2s, &mask_t2s, pads.student, pads.teacher)?;
    let (s2t, f2) = guarded_softmax(&zeros_s2t, &mask_s2t, pads.teacher, pads.student)?;
    Ok(Attention {
        t2s,
        s2t,
        fallback_rows: f1 + f2,
    })
}

/// Value projections. Teacher-side inputs are constants; `P_t2s` still trains.
pub fn project_values<T: Scalar>(
    student: &ForwardOutput<T>,
    teacher: &ForwardOutput<T>,
    proj: &Projectors<T>,
) -> Result<(Tensor<T>, Tensor<T>), CmaError> {
    let v_s2t = proj.s2t.forward(&student.hidden)?;
    let t_in = teacher
        .hidden
        .std_normalize_rows()?
        .add(&teacher.target_embeds.std_normalize_rows()?)?
        .detach();
    let v_t2s = proj.t2s.forward(&t_in)?;
    Ok((v_s2t, v_t2s))
}

/// Moves each side's values to the other side's sequence length.
pub fn cross_states<T: Scalar>(
    weights: &Attention<T>,
    v_t2s: &Tensor<T>,
    v_s2t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), CmaError> {
    Ok((weights.t2s.matmul(v_t2s)?, weights.s2t.matmul(v_s2t)?))
}

/// Per-example inputs of the dual-space objective.
pub struct DualSpaceInputs<'a, T: Scalar> {
    pub student: &'a ForwardOutput<T>,
    pub teacher: &'a ForwardOutput<T>,
    /// Student prediction head `W^s`.
    pub student_head: &'a Tensor<T>,
    /// Teacher prediction head `W^t` (frozen).
    pub teacher_head: &'a Tensor<T>,
    pub gold_s: &'a [usize],
    pub gold_t: &'a [usize],
    /// Response positions in student space.
    pub mask_s: &'a [bool],
    /// Response positions in teacher space.
    pub mask_t: &'a [bool],
}

/// Loss terms of one example, still attached to the graph.
#[derive(Debug, Clone)]
pub struct DualSpaceLosses<T: Scalar> {
    pub ce_s: Tensor<T>,
    pub kd_s2t: Tensor<T>,
    pub kd_t2s: Tensor<T>,
    pub ce_t: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub weights: Attention<T>,
    /// Teacher states projected into the student vocabulary, `n_s × V_s`.
    pub q_t2s: Tensor<T>,
}

impl<T: Scalar> DualSpaceLosses<T> {
    /// `½·CE^s + ½·(KD^{s→t} + KD^{t→s} + CE^t)`.
    pub fn total(&self) -> Result<Tensor<T>, CmaError> {
        let half = T::lit(0.5);
        let kd = self.kd_s2t.add(&self.kd_t2s)?.add(&self.ce_t)?;
        Ok(self.ce_s.scale(half).add(&kd.scale(half))?)
    }
}

/// Options of the dual-space objective.
#[derive(Debug, Clone, Copy)]
pub struct DualSpaceConfig {
    pub mode: AlignmentMode,
    pub divergence: Divergence,
    /// Evaluate `f(q‖p)` instead of `f(p‖q)` in both KD terms.
    pub swap_kd_args: bool,
}

/// Runs the whole cross-model pipeline for one example.
///
/// Stop-gradients: the teacher distribution `p^t` is a fixed target; in
/// `KD^{t→s}` the projected distribution `q_t2s` is a fixed target for the
/// student, while `q_t2s` itself is trained by its cross-entropy `CE^t`
/// against the student-space gold tokens.
pub fn dual_space_losses<T: Scalar>(
    inputs: &DualSpaceInputs<'_, T>,
    proj: &Projectors<T>,
    cfg: &DualSpaceConfig,
    alignment: Option<&AlignmentMatrix>,
) -> Result<DualSpaceLosses<T>, CmaError> {
    let (n_s, _) = inputs.student.hidden.dims2()?;
    let (n_t, _) = inputs.teacher.hidden.dims2()?;
    if let Some(m) = alignment {
        check_alignment_dims(m, n_s, n_t)?;
    }
    let (q, k) = build_qk(inputs.student, inputs.teacher, proj)?;
    let weights = match cfg.mode {
        AlignmentMode::Clp => chunk_projection(alignment.ok_or(CmaError::MissingAlignment(cfg.mode))?, PadMasks::default())?,
        mode => attention(&q, &k, mode, alignment, PadMasks::default())?,
    };
    let (v_s2t, v_t2s) = project_values(inputs.student, inputs.teacher, proj)?;
    let (h_t2s, h_s2t) = cross_states(&weights, &v_t2s, &v_s2t)?;

    let p_s = inputs.student.logits.softmax_rows(None)?;
    let p_t = inputs.teacher.logits.detach().softmax_rows(None)?;
    let logits_t2s = h_t2s.matmul(inputs.student_head)?;
    let q_t2s = logits_t2s.softmax_rows(None)?;
    let q_s2t = h_s2t.matmul(&inputs.teacher_head.detach())?.softmax_rows(None)?;

    let div = &cfg.divergence;
    let q_t2s_target = q_t2s.detach();
    let kd_t2s = if cfg.swap_kd_args {
        div.compute(&q_t2s_target, &p_s, inputs.mask_s)?
    } else {
        div.compute(&p_s, &q_t2s_target, inputs.mask_s)?
    };
    let kd_s2t = if cfg.swap_kd_args {
        div.compute(&q_s2t, &p_t, inputs.mask_t)?
    } else {
        div.compute(&p_t, &q_s2t, inputs.mask_t)?
    };
    let ce_s = ce_loss(&inputs.student.logits, inputs.gold_s, inputs.mask_s)?;
    let ce_t = ce_loss(&logits_t2s, inputs.gold_s, inputs.mask_s)?;
    Ok(DualSpaceLosses {
        ce_s,
        kd_s2t,
        kd_t2s,
        ce_t,
        q,
        k,
        weights,
        q_t2s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_matrices, ChunkSet};

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn orthonormal_queries_attend_to_themselves() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 4.0 } else { 0.0 }).collect())
            .collect();
        let q = t(&rows);
        let a = attention(&q, &q, AlignmentMode::Cma, None, PadMasks::default()).unwrap();
        for i in 0..4 {
            let row = a.t2s.row(i);
            let argmax = (0..4).max_by(|&x, &y| row[x].partial_cmp(&row[y]).unwrap()).unwrap();
            assert_eq!(argmax, i);
            assert!(row[i] > 0.5);
        }
    }

    #[test]
    fn cla_with_diagonal_alignment_is_identity() {
        let q = t(&[vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.5, 0.7]]);
        let k = t(&[vec![1.0, 1.0], vec![0.2, -0.4], vec![0.0, 3.0]]);
        let m = build_matrices(&ChunkSet::diagonal(3), 3, 3).unwrap();
        let a = attention(&q, &k, AlignmentMode::Cla, Some(&m), PadMasks::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.t2s.row(i)[j], if i == j { 1.0 } else { 0.0 });
                assert_eq!(a.s2t.row(i)[j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn cla_without_alignment_errors() {
        let q = t(&[vec![1.0, 0.0]]);
        assert!(matches!(
            attention(&q, &q, AlignmentMode::Cla, None, PadMasks::default()),
            Err(CmaError::MissingAlignment(AlignmentMode::Cla))
        ));
    }

    #[test]
    fn padded_columns_get_no_weight() {
        let q = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]);
        let pads = PadMasks {
            student: None,
            teacher: Some(&[true, true, false]),
        };
        let a = attention(&q, &k, AlignmentMode::Cma, None, pads).unwrap();
        for i in 0..2 {
            let row = a.t2s.row(i);
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // padded teacher row of the reverse direction is all zero
        assert!(a.s2t.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_projection_is_uniform_within_chunks() {
        let m = build_matrices(&ChunkSet::from_quads(vec![(0, 1, 0, 2), (1, 3, 2, 3)]), 3, 3).unwrap();
        let w = chunk_projection::<f64>(&m, PadMasks::default()).unwrap();
        assert_eq!(w.t2s.to_vec(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert_eq!(w.fallback_rows, 0);
    }

    #[test]
    fn empty_alignment_row_falls_back_to_uniform() {
        let m = build_matrices(&ChunkSet::from_quads(vec![(0, 1, 0, 1)]), 2, 2).unwrap();
        let w = chunk_projection::<f64>(&m, PadMasks::default()).unwrap();
        assert_eq!(w.fallback_rows, 2);
        assert_eq!(w.t2s.row(1), vec![0.5, 0.5]);
    }

    #[test]
    fn identity_weights_copy_values() {
        let id = build_matrices(&ChunkSet::diagonal(2), 2, 2).unwrap();
        let w = chunk_projection::<f64>(&id, PadMasks::default()).unwrap();
        let v_t2s = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let v_s2t = t(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]);
        let (h_t2s, h_s2t) = cross_states(&w, &v_t2s, &v_s2t).unwrap();
        assert_eq!(h_t2s.to_vec(), v_t2s.to_vec());
        assert_eq!(h_s2t.to_vec(), v_s2t.to_vec());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [AlignmentMode::Cma, AlignmentMode::Clp, AlignmentMode::Cla] {
            assert_eq!(m.name().parse::<AlignmentMode>().unwrap(), m);
        }
    }
}

//! Minimal chunk alignment between two tokenizations of one text and the
//! binary alignment matrices derived from it.

use std::ops::Range;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use crate::tok::Tokenization;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("tokenizations cover different texts ({teacher_len} vs {student_len} bytes)")]
    TextMismatch { teacher_len: usize, student_len: usize },
    #[error("chunk {quad:?} out of range for n_t={n_t}, n_s={n_s}")]
    OutOfRange {
        quad: Quad,
        n_t: usize,
        n_s: usize,
    },
}

/// `(i, j, k, l)`: teacher tokens `i..j` and student tokens `k..l` span the same text.
pub type Quad = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChunkSet {
    quads: Vec<Quad>,
}

impl ChunkSet {
    pub fn from_quads(quads: Vec<Quad>) -> Self {
        ChunkSet { quads }
    }

    /// One 1×1 chunk per position, for two identical tokenizations of length `n`.
    pub fn diagonal(n: usize) -> Self {
        ChunkSet {
            quads: (0..n).map(|p| (p, p + 1, p, p + 1)).collect(),
        }
    }

    pub fn quads(&self) -> &[Quad] {
        &self.quads
    }

    pub fn len(&self) -> usize {
        self.quads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quads.is_empty()
    }

    pub fn teacher_len(&self) -> usize {
        self.quads.last().map_or(0, |q| q.1)
    }

    pub fn student_len(&self) -> usize {
        self.quads.last().map_or(0, |q| q.3)
    }

    /// Shifts every chunk right by one position on both sides and adds a 1×1
    /// chunk for a leading special token (bos) present in both sequences.
    pub fn with_leading_special(&self) -> ChunkSet {
        let mut quads = Vec::with_capacity(self.quads.len() + 1);
        quads.push((0, 1, 0, 1));
        quads.extend(self.quads.iter().map(|&(i, j, k, l)| (i + 1, j + 1, k + 1, l + 1)));
        ChunkSet { quads }
    }

    pub fn teacher_range(q: &Quad) -> Range<usize> {
        q.0..q.1
    }

    pub fn student_range(q: &Quad) -> Range<usize> {
        q.2..q.3
    }
}

/// Two-pointer sweep over end offsets: the side whose current token ends
/// earlier advances; equal offsets close a chunk. Runs in `O(n_t + n_s)`.
pub fn align_chunks(teacher: &Tokenization, student: &Tokenization) -> Result<ChunkSet, AlignError> {
    if teacher.text != student.text {
        return Err(AlignError::TextMismatch {
            teacher_len: teacher.text.len(),
            student_len: student.text.len(),
        });
    }
    let (nt, ns) = (teacher.len(), student.len());
    let mut quads = Vec::new();
    let (mut ti, mut si) = (0, 0);
    let (mut start_t, mut start_s) = (0, 0);
    while ti < nt && si < ns {
        let (et, es) = (teacher.end_offsets[ti], student.end_offsets[si]);
        if et == es {
            ti += 1;
            si += 1;
            quads.push((start_t, ti, start_s, si));
            start_t = ti;
            start_s = si;
        } else if et < es {
            ti += 1;
        } else {
            si += 1;
        }
    }
    debug_assert!(ti == nt && si == ns, "both tokenizations end at the text length");
    Ok(ChunkSet { quads })
}

/// Row-major 0/1 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMatrix {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> BinaryMatrix {
        let mut out = BinaryMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor<T: Scalar>(&self) -> tensor::Result<Tensor<T>> {
        Tensor::new(
            self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
            &[self.rows, self.cols],
        )
    }
}

/// `m_t2s` is `n_s × n_t` (rows index student positions); `m_s2t` is its transpose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    pub m_t2s: BinaryMatrix,
    pub m_s2t: BinaryMatrix,
}

/// Ones exactly inside the chunk rectangles, zeros elsewhere.
pub fn build_matrices(chunks: &ChunkSet, n_t: usize, n_s: usize) -> Result<AlignmentMatrix, AlignError> {
    let mut m = BinaryMatrix::zeros(n_s, n_t);
    for &quad in chunks.quads() {
        let (i, j, k, l) = quad;
        if i > j || k > l || j > n_t || l > n_s {
            return Err(AlignError::OutOfRange { quad, n_t, n_s });
        }
        for r in k..l {
            for c in i..j {
                m.data[r * n_t + c] = true;
            }
        }
    }
    let m_s2t = m.transpose();
    Ok(AlignmentMatrix { m_t2s: m, m_s2t })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, pieces: &[&str]) -> Tokenization {
        let mut end = 0;
        let end_offsets = pieces
            .iter()
            .map(|p| {
                end += p.len();
                end
            })
            .collect();
        Tokenization {
            ids: (0..pieces.len()).collect(),
            end_offsets,
            text: text.to_owned(),
        }
    }

    #[test]
    fn worked_example() {
        let t = tok("abcde", &["ab", "cd", "e"]);
        let s = tok("abcde", &["a", "b", "cde"]);
        let c = align_chunks(&t, &s).unwrap();
        assert_eq!(c.quads(), &[(0, 1, 0, 2), (1, 3, 2, 3)]);
        let m = build_matrices(&c, 3, 3).unwrap();
        let expected = [[1, 0, 0], [1, 0, 0], [0, 1, 1]];
        for r in 0..3 {
            for col in 0..3 {
                assert_eq!(m.m_t2s.get(r, col), expected[r][col] == 1);
            }
        }
        assert_eq!(m.m_s2t, m.m_t2s.transpose());
    }

    #[test]
    fn identical_tokenizations_give_diagonal() {
        let t = tok("hello", &["he", "l", "lo"]);
        let c = align_chunks(&t, &t).unwrap();
        assert_eq!(c, ChunkSet::diagonal(3));
        let m = build_matrices(&c, 3, 3).unwrap();
        for r in 0..3 {
            for col in 0..3 {
                assert_eq!(m.m_t2s.get(r, col), r == col);
            }
        }
    }

    #[test]
    fn empty_text_gives_empty_chunks() {
        let t = tok("", &[]);
        assert!(align_chunks(&t, &t).unwrap().is_empty());
    }

    #[test]
    fn single_chunk_is_all_ones() {
        let c = ChunkSet::from_quads(vec![(0, 2, 0, 3)]);
        let m = build_matrices(&c, 2, 3).unwrap();
        assert!(m.m_t2s.data.iter().all(|&b| b));
    }

    #[test]
    fn text_mismatch_rejected() {
        let t = tok("ab", &["ab"]);
        let s = tok("ac", &["ac"]);
        assert!(matches!(align_chunks(&t, &s), Err(AlignError::TextMismatch { .. })));
    }

    #[test]
    fn out_of_range_quad_rejected() {
        let c = ChunkSet::from_quads(vec![(0, 4, 0, 1)]);
        assert!(matches!(build_matrices(&c, 3, 3), Err(AlignError::OutOfRange { .. })));
    }

    #[test]
    fn leading_special_shifts_chunks() {
        let c = ChunkSet::from_quads(vec![(0, 1, 0, 2)]).with_leading_special();
        assert_eq!(c.quads(), &[(0, 1, 0, 1), (1, 2, 1, 3)]);
    }
}

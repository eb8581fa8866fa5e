use super::{Op, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Guard added to a row's standard deviation when it falls below this value.
pub const STD_EPS: f64 = 1e-8;
const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

fn build<T: Scalar>(data: Vec<T>, shape: Vec<usize>, tracked: bool, op: impl FnOnce() -> Op<T>) -> Tensor<T> {
    if tracked {
        Tensor::from_parts(data, shape, true, op())
    } else {
        Tensor::from_parts(data, shape, false, Op::Leaf)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulated into `c`.
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T, op: impl FnOnce(Tensor<T>) -> Op<T>) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    build(data, x.shape().to_vec(), x.requires_grad(), || op(x.clone()))
}

fn binary<T: Scalar>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
    op: impl FnOnce(Tensor<T>, Tensor<T>) -> Op<T>,
) -> Result<Tensor<T>> {
    same_shape(name, a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Ok(build(data, a.shape().to_vec(), a.requires_grad() || b.requires_grad(), || {
        op(a.clone(), b.clone())
    }))
}

pub(crate) fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(&self.data(), &other.data(), &mut out, m, k, n);
        Ok(build(out, vec![m, n], self.requires_grad() || other.requires_grad(), || {
            Op::MatMul(self.clone(), other.clone())
        }))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", self, other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", self, other, |a, b| a - b, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", self, other, |a, b| a * b, Op::Mul)
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("div", self, other, |a, b| a / b, Op::Div)
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        row: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Tensor<T>, Tensor<T>) -> Op<T>,
    ) -> Result<Tensor<T>> {
        let (_, n) = self.dims2()?;
        if row.numel() != n {
            return Err(TensorError::Shape {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let r = row.data();
        let data: Vec<T> = self
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| f(x, r[idx % n]))
            .collect();
        drop(r);
        Ok(build(data, self.shape().to_vec(), self.requires_grad() || row.requires_grad(), || {
            op(self.clone(), row.clone())
        }))
    }

    /// Adds a length-`n` row vector to every row (bias add).
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        self.row_broadcast("add_row", row, |a, b| a + b, Op::AddRow)
    }

    /// Multiplies every row elementwise by a length-`n` row vector.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        self.row_broadcast("mul_row", row, |a, b| a * b, Op::MulRow)
    }

    /// Multiplies every element by a single-element tensor.
    pub fn mul_scalar_tensor(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar_tensor",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let data = self.data().iter().map(|&x| x * sv).collect();
        Ok(build(data, self.shape().to_vec(), self.requires_grad() || s.requires_grad(), || {
            Op::MulScalarTensor(self.clone(), s.clone())
        }))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        unary(self, |x| x * s, |t| Op::Scale(t, s))
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        unary(self, |x| x + s, Op::AddScalar)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let d = self.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        Ok(build(out, vec![n, m], self.requires_grad(), || Op::Transpose(self.clone())))
    }

    /// Concatenates along the last (column) dimension.
    pub fn concat_cols(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n1) = self.dims2()?;
        let (m2, n2) = other.dims2()?;
        if m != m2 {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.data(), other.data());
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(&a[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&b[i * n2..(i + 1) * n2]);
        }
        drop((a, b));
        Ok(build(out, vec![m, n1 + n2], self.requires_grad() || other.requires_grad(), || {
            Op::ConcatCols(self.clone(), other.clone())
        }))
    }

    /// Stacks `other` below `self`.
    pub fn concat_rows(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, n1) = self.dims2()?;
        let (_, n2) = other.dims2()?;
        if n1 != n2 {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        self.transpose()?.concat_cols(&other.transpose()?)?.transpose()
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if len == 0 || start + len > n {
            return Err(TensorError::contract(
                "slice_cols",
                format!("columns {start}..{} out of range for {n}", start + len),
            ));
        }
        let d = self.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        drop(d);
        Ok(build(out, vec![m, len], self.requires_grad(), || Op::SliceCols(self.clone(), start)))
    }

    /// Row lookup: output row `r` is `self[indices[r]]` (embedding gather).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if indices.is_empty() {
            return Err(TensorError::contract("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(TensorError::contract(
                "gather_rows",
                format!("row index {bad} out of range for {m} rows"),
            ));
        }
        let d = self.data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        drop(d);
        Ok(build(out, vec![indices.len(), n], self.requires_grad(), || {
            Op::GatherRows(self.clone(), indices.to_vec())
        }))
    }

    /// Picks one column per row: output is `m×1` with `out[i] = self[i, cols[i]]`.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if cols.len() != m {
            return Err(TensorError::contract(
                "pick",
                format!("{} column indices for {m} rows", cols.len()),
            ));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(TensorError::contract("pick", format!("column {bad} out of range for {n}")));
        }
        let d = self.data();
        let out: Vec<T> = cols.iter().enumerate().map(|(i, &c)| d[i * n + c]).collect();
        drop(d);
        Ok(build(out, vec![m, 1], self.requires_grad(), || Op::Pick(self.clone(), cols.to_vec())))
    }

    pub fn log(&self) -> Tensor<T> {
        unary(self, |x| x.ln(), Op::Log)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, |x| x.exp(), Op::Exp)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(self, |x| x.tanh(), Op::Tanh)
    }

    pub fn gelu(&self) -> Tensor<T> {
        unary(self, |x| gelu_parts(x).0, Op::Gelu)
    }

    /// `max(x, slope·x)` for `0 ≤ slope < 1`.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        unary(self, |x| if x > T::zero() { x } else { slope * x }, |t| Op::LeakyRelu(t, slope))
    }

    pub fn abs(&self) -> Tensor<T> {
        unary(self, |x| x.abs(), Op::Abs)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        unary(self, |x| x.max(lo).min(hi), |t| Op::Clamp(t, lo, hi))
    }

    pub fn clamp_min(&self, lo: T) -> Tensor<T> {
        self.clamp(lo, T::infinity())
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        build(vec![s], vec![1], self.requires_grad(), || Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        let s: T = self.data().iter().copied().sum();
        build(vec![s / n], vec![1], self.requires_grad(), || Op::Mean(self.clone()))
    }

    /// Per-row sums of a 2-D tensor, as `m×1`.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let d = self.data();
        let out: Vec<T> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        drop(d);
        Ok(build(out, vec![m, 1], self.requires_grad(), || Op::SumRows(self.clone())))
    }

    /// Row-wise softmax with max subtraction. Entries whose mask is `false`
    /// get exactly zero probability. Rows with no admissible entry come back
    /// all-zero.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor<T>> {
        self.softmax_rows_flagged(mask).map(|(t, _)| t)
    }

    /// As [`softmax_rows`](Self::softmax_rows), also returning the indices of
    /// degenerate (fully masked) rows.
    pub fn softmax_rows_flagged(&self, mask: Option<&[bool]>) -> Result<(Tensor<T>, Vec<usize>)> {
        let (m, n) = self.dims2()?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    lhs: self.shape().to_vec(),
                    rhs: vec![mk.len()],
                });
            }
        }
        let admit = |idx: usize| mask.map_or(true, |mk| mk[idx]);
        let d = self.data();
        let mut out = vec![T::zero(); m * n];
        let mut degenerate = Vec::new();
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if admit(i * n + j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                degenerate.push(i);
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if admit(i * n + j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total = total + e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        drop(d);
        let t = build(out, vec![m, n], self.requires_grad(), || Op::Softmax(self.clone()));
        Ok((t, degenerate))
    }

    /// Row-wise log-softmax (unmasked), via log-sum-exp.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let d = self.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        drop(d);
        Ok(build(out, vec![m, n], self.requires_grad(), || Op::LogSoftmax(self.clone())))
    }

    /// Divides each row by its own population standard deviation, without
    /// subtracting the mean. Rows with std below [`STD_EPS`] are divided by
    /// `std + STD_EPS` instead.
    pub fn std_normalize_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if n < 2 {
            return Err(TensorError::contract("std_normalize_rows", "rows need at least 2 entries"));
        }
        let eps = T::lit(STD_EPS);
        let nn = T::lit(n as f64);
        let d = self.data();
        let mut out = vec![T::zero(); m * n];
        let (mut means, mut stds, mut divisors) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let std = var.sqrt();
            let divisor = if std < eps { std + eps } else { std };
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / divisor;
            }
            means.push(mean);
            stds.push(std);
            divisors.push(divisor);
        }
        drop(d);
        Ok(build(out, vec![m, n], self.requires_grad(), || Op::StdNorm {
            input: self.clone(),
            mean: means,
            std: stds,
            divisor: divisors,
        }))
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let nn = T::lit(n as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let d = self.data();
        let mut out = vec![T::zero(); m * n];
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv.push(r);
        }
        drop(d);
        Ok(build(out, vec![m, n], self.requires_grad(), || Op::LayerNorm(self.clone(), inv)))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let eps = T::lit(L2_EPS);
        let d = self.data();
        let mut out = vec![T::zero(); m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        drop(d);
        Ok(build(out, vec![m, n], self.requires_grad(), || Op::L2Norm(self.clone(), norms)))
    }

    /// Affine layer `x·W + b`.
    pub fn affine(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul(weight)?.add_row(bias)
    }
}

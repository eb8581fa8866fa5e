use std::collections::HashSet;

use super::ops::{gelu_parts, mm_acc};
use super::{Op, Result, Tensor, TensorError};
use crate::scalar::Scalar;

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b)
            | MulRow(a, b) | MulScalarTensor(a, b) | ConcatCols(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Transpose(a) | SliceCols(a, _) | GatherRows(a, _)
            | Pick(a, _) | Log(a) | Exp(a) | Sigmoid(a) | Tanh(a) | Gelu(a) | LeakyRelu(a, _)
            | Abs(a) | Clamp(a, _, _) | Sum(a) | Mean(a) | SumRows(a) | Softmax(a)
            | LogSoftmax(a) | LayerNorm(a, _) | L2Norm(a, _) => vec![a],
            StdNorm { input, .. } => vec![input],
        }
    }
}

/// Post-order over the gradient-tracking subgraph rooted at `root`.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.node_key()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.node().op.inputs() {
            if p.requires_grad() && !seen.contains(&p.node_key()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

impl<T: Scalar> Tensor<T> {
    /// Reverse-mode sweep from a single-element loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(TensorError::contract(
                "backward",
                "loss does not depend on any gradient-tracking tensor",
            ));
        }
        let order = topo_order(self);
        for t in &order {
            if !matches!(t.node().op, Op::Leaf) {
                *t.node().grad.borrow_mut() = None;
            }
        }
        self.node().accumulate(&[T::one()]);
        for t in order.iter().rev() {
            let node = t.node();
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.borrow().clone() else {
                continue;
            };
            propagate(t, &g);
        }
        Ok(())
    }
}

fn propagate<T: Scalar>(out: &Tensor<T>, g: &[T]) {
    use Op::*;
    let node = out.node();
    match &node.op {
        Leaf => {}
        MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let bt = transpose_raw(&b.data(), k, n);
                let mut da = vec![T::zero(); m * k];
                mm_acc(g, &bt, &mut da, m, n, k);
                a.node().accumulate(&da);
            }
            if b.requires_grad() {
                let at = transpose_raw(&a.data(), m, k);
                let mut db = vec![T::zero(); k * n];
                mm_acc(&at, g, &mut db, k, m, n);
                b.node().accumulate(&db);
            }
        }
        Add(a, b) => {
            a.node().accumulate(g);
            b.node().accumulate(g);
        }
        Sub(a, b) => {
            a.node().accumulate(g);
            if b.requires_grad() {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                b.node().accumulate(&neg);
            }
        }
        Mul(a, b) => {
            if a.requires_grad() {
                let da: Vec<T> = g.iter().zip(b.data().iter()).map(|(&gi, &bi)| gi * bi).collect();
                a.node().accumulate(&da);
            }
            if b.requires_grad() {
                let db: Vec<T> = g.iter().zip(a.data().iter()).map(|(&gi, &ai)| gi * ai).collect();
                b.node().accumulate(&db);
            }
        }
        Div(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            if a.requires_grad() {
                let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi / bi).collect();
                a.node().accumulate(&da);
            }
            if b.requires_grad() {
                let db: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                b.node().accumulate(&db);
            }
        }
        AddRow(x, r) => {
            x.node().accumulate(g);
            if r.requires_grad() {
                let n = r.numel();
                let mut dr = vec![T::zero(); n];
                for (idx, &gi) in g.iter().enumerate() {
                    dr[idx % n] = dr[idx % n] + gi;
                }
                r.node().accumulate(&dr);
            }
        }
        MulRow(x, r) => {
            let n = r.numel();
            if x.requires_grad() {
                let rd = r.data();
                let dx: Vec<T> = g.iter().enumerate().map(|(idx, &gi)| gi * rd[idx % n]).collect();
                x.node().accumulate(&dx);
            }
            if r.requires_grad() {
                let xd = x.data();
                let mut dr = vec![T::zero(); n];
                for (idx, &gi) in g.iter().enumerate() {
                    dr[idx % n] = dr[idx % n] + gi * xd[idx];
                }
                r.node().accumulate(&dr);
            }
        }
        MulScalarTensor(x, s) => {
            if x.requires_grad() {
                let sv = s.item();
                let dx: Vec<T> = g.iter().map(|&gi| gi * sv).collect();
                x.node().accumulate(&dx);
            }
            if s.requires_grad() {
                let ds: T = g.iter().zip(x.data().iter()).map(|(&gi, &xi)| gi * xi).sum();
                s.node().accumulate(&[ds]);
            }
        }
        Scale(x, s) => {
            let dx: Vec<T> = g.iter().map(|&gi| gi * *s).collect();
            x.node().accumulate(&dx);
        }
        AddScalar(x) => x.node().accumulate(g),
        Transpose(x) => {
            let (m, n) = (x.shape()[0], x.shape()[1]);
            // g is n×m
            x.node().accumulate(&transpose_raw(g, n, m));
        }
        ConcatCols(a, b) => {
            let m = a.shape()[0];
            let (n1, n2) = (a.shape()[1], b.shape()[1]);
            let w = n1 + n2;
            if a.requires_grad() {
                let da: Vec<T> = (0..m).flat_map(|i| g[i * w..i * w + n1].iter().copied()).collect();
                a.node().accumulate(&da);
            }
            if b.requires_grad() {
                let db: Vec<T> = (0..m).flat_map(|i| g[i * w + n1..(i + 1) * w].iter().copied()).collect();
                b.node().accumulate(&db);
            }
        }
        SliceCols(x, start) => {
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let len = node.shape[1];
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            x.node().accumulate(&dx);
        }
        GatherRows(x, idx) => {
            let n = x.shape()[1];
            let mut dx = vec![T::zero(); x.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..n {
                    dx[src * n + j] = dx[src * n + j] + g[r * n + j];
                }
            }
            x.node().accumulate(&dx);
        }
        Pick(x, cols) => {
            let n = x.shape()[1];
            let mut dx = vec![T::zero(); x.numel()];
            for (i, &c) in cols.iter().enumerate() {
                dx[i * n + c] = g[i];
            }
            x.node().accumulate(&dx);
        }
        Log(x) => {
            let dx: Vec<T> = g.iter().zip(x.data().iter()).map(|(&gi, &xi)| gi / xi).collect();
            x.node().accumulate(&dx);
        }
        Exp(x) => {
            let y = node.data.borrow();
            let dx: Vec<T> = g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect();
            x.node().accumulate(&dx);
        }
        Sigmoid(x) => {
            let y = node.data.borrow();
            let dx: Vec<T> = g
                .iter()
                .zip(y.iter())
                .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                .collect();
            x.node().accumulate(&dx);
        }
        Tanh(x) => {
            let y = node.data.borrow();
            let dx: Vec<T> = g
                .iter()
                .zip(y.iter())
                .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                .collect();
            x.node().accumulate(&dx);
        }
        Gelu(x) => {
            let dx: Vec<T> = g
                .iter()
                .zip(x.data().iter())
                .map(|(&gi, &xi)| gi * gelu_parts(xi).1)
                .collect();
            x.node().accumulate(&dx);
        }
        LeakyRelu(x, slope) => {
            let dx: Vec<T> = g
                .iter()
                .zip(x.data().iter())
                .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * *slope })
                .collect();
            x.node().accumulate(&dx);
        }
        Abs(x) => {
            let dx: Vec<T> = g
                .iter()
                .zip(x.data().iter())
                .map(|(&gi, &xi)| {
                    if xi > T::zero() {
                        gi
                    } else if xi < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                })
                .collect();
            x.node().accumulate(&dx);
        }
        Clamp(x, lo, hi) => {
            let dx: Vec<T> = g
                .iter()
                .zip(x.data().iter())
                .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                .collect();
            x.node().accumulate(&dx);
        }
        Sum(x) => x.node().accumulate(&vec![g[0]; x.numel()]),
        Mean(x) => {
            let n = T::lit(x.numel() as f64);
            x.node().accumulate(&vec![g[0] / n; x.numel()]);
        }
        SumRows(x) => {
            let n = x.shape()[1];
            let dx: Vec<T> = (0..x.numel()).map(|idx| g[idx / n]).collect();
            x.node().accumulate(&dx);
        }
        Softmax(x) => {
            let n = node.shape[1];
            let y = node.data.borrow();
            let mut dx = vec![T::zero(); y.len()];
            for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = yr[j] * (gr[j] - s);
                }
            }
            x.node().accumulate(&dx);
        }
        LogSoftmax(x) => {
            let n = node.shape[1];
            let y = node.data.borrow();
            let mut dx = vec![T::zero(); y.len()];
            for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                let s: T = gr.iter().copied().sum();
                for j in 0..n {
                    dx[i * n + j] = gr[j] - yr[j].exp() * s;
                }
            }
            x.node().accumulate(&dx);
        }
        StdNorm {
            input,
            mean,
            std,
            divisor,
        } => {
            let n = node.shape[1];
            let nn = T::lit(n as f64);
            let xd = input.data();
            let mut dx = vec![T::zero(); xd.len()];
            for i in 0..node.shape[0] {
                let xr = &xd[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let d = divisor[i];
                let gx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                let coupling = if std[i] > T::zero() {
                    gx / (d * d * nn * std[i])
                } else {
                    T::zero()
                };
                for j in 0..n {
                    dx[i * n + j] = gr[j] / d - coupling * (xr[j] - mean[i]);
                }
            }
            input.node().accumulate(&dx);
        }
        LayerNorm(x, inv) => {
            let n = node.shape[1];
            let nn = T::lit(n as f64);
            let y = node.data.borrow();
            let mut dx = vec![T::zero(); y.len()];
            for i in 0..node.shape[0] {
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let sg: T = gr.iter().copied().sum();
                let sgy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = inv[i] / nn * (nn * gr[j] - sg - yr[j] * sgy);
                }
            }
            x.node().accumulate(&dx);
        }
        L2Norm(x, norms) => {
            let n = node.shape[1];
            let y = node.data.borrow();
            let mut dx = vec![T::zero(); y.len()];
            for i in 0..node.shape[0] {
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = (gr[j] - yr[j] * gy) / norms[i];
                }
            }
            x.node().accumulate(&dx);
        }
    }
}

fn transpose_raw<T: Scalar>(d: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

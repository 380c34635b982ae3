//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records a small fixed vocabulary of operations -- enough to
//! express the toy encoder-decoder and the distillation objective -- and
//! replays them backwards to produce exact analytic gradients. Loss heads
//! (NLL, tempered KL, trace MSE) are fused nodes so the log-softmax path is
//! numerically stable and the graph stays small.
//!
//! Every operation's backward rule is checked against central finite
//! differences in this module's tests before anything downstream uses it.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::num;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the gradient list returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// `a @ b`
    MatMul(Var, Var),
    /// `a @ b^T`
    MatMulTb(Var, Var),
    /// Elementwise sum of two same-shape nodes.
    Add(Var, Var),
    /// `[n,d] + [1,d]` row broadcast.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    /// Per-row layer norm with learned gain/shift (`gamma`, `beta` are `[1,d]`).
    LayerNorm { x: Var, gamma: Var, beta: Var },
    /// Row softmax where row `i` sees columns `0..=offset+i`; the rest are zero.
    CausalSoftmax { x: Var },
    /// Full-row softmax (cross attention).
    RowSoftmax(Var),
    SliceCols { x: Var, from: usize, to: usize },
    ConcatCols(Vec<Var>),
    /// Row gather; duplicated indices accumulate gradient.
    GatherRows { x: Var, idx: Vec<usize> },
    /// Stride-2 mean pool over rows; an odd tail row pools alone.
    MeanPool2(Var),
    /// Scalar combination `sum_i c_i * x_i` of `1x1` nodes.
    SumScaled(Vec<(Var, f64)>),
    /// `-sum_i log softmax(logits)_i[target_i]`, one row per target.
    Nll { logits: Var, targets: Vec<usize> },
    /// `tau^2 * sum_i KL(q_i || softmax(logits_i / tau))` with constant `q`.
    KlToTeacher { logits: Var, q: Mat, tau: f64 },
    /// `sum_i mean_cols (x_i - t_i)^2` with constant target rows.
    MseTo { x: Var, target: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximation GELU; smooth everywhere, so finite-difference probes
/// of the full model stay well conditioned.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + num::tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = num::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Stable per-row softmax of `row` into a fresh vector, over `row[..limit]`;
/// entries at `limit..` become zero.
pub(crate) fn softmax_row_prefix(row: &[f64], limit: usize) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    let m = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for j in 0..limit {
        let e = num::exp(row[j] - m);
        out[j] = e;
        z += e;
    }
    for v in &mut out[..limit] {
        *v /= z;
    }
    out
}

/// Stable log-softmax of a full row.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| num::exp(x - m)).sum();
    let lz = num::ln(z) + m;
    row.iter().map(|&x| x - lz).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_tb(self.value(b));
        self.push(v, Op::MatMulTb(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for (x, y) in row.iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let d = xv.cols();
        assert_eq!(g.cols(), d);
        assert_eq!(b.cols(), d);
        let mut out = Mat::zeros(xv.rows(), d);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mean, rstd) = row_moments(row);
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = g.at(0, c) * (row[c] - mean) * rstd + b.at(0, c);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let limit = (offset + r + 1).min(xv.cols());
            let sm = softmax_row_prefix(xv.row(r), limit);
            out.row_mut(r).copy_from_slice(&sm);
        }
        self.push(out, Op::CausalSoftmax { x })
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let sm = softmax_row_prefix(xv.row(r), xv.cols());
            out.row_mut(r).copy_from_slice(&sm);
        }
        self.push(out, Op::RowSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = self.value(x);
        assert!(from < to && to <= xv.cols());
        let mut out = Mat::zeros(xv.rows(), to - from);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[from..to]);
        }
        self.push(out, Op::SliceCols { x, from, to })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.value(xs[0]).rows();
        let cols: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for &v in xs {
            let m = self.value(v);
            assert_eq!(m.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[at..at + m.cols()].copy_from_slice(m.row(r));
            }
            at += m.cols();
        }
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn mean_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let m = n.div_ceil(2);
        let mut out = Mat::zeros(m, xv.cols());
        for g in 0..m {
            let lo = 2 * g;
            let hi = (lo + 2).min(n);
            let inv = 1.0 / (hi - lo) as f64;
            let o = out.row_mut(g);
            for r in lo..hi {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b * inv;
                }
            }
        }
        self.push(out, Op::MeanPool2(x))
    }

    pub fn sum_scaled(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for &(v, c) in terms {
            let m = self.value(v);
            assert_eq!((m.rows(), m.cols()), (1, 1));
            acc += c * m.at(0, 0);
        }
        self.push(Mat::from_vec(1, 1, vec![acc]), Op::SumScaled(terms.to_vec()))
    }

    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lsm = log_softmax_row(z.row(r));
            loss -= lsm[t];
        }
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::Nll { logits, targets: targets.to_vec() },
        )
    }

    pub fn kl_to_teacher(&mut self, logits: Var, q: Mat, tau: f64) -> Var {
        let z = self.value(logits);
        assert_eq!((z.rows(), z.cols()), (q.rows(), q.cols()));
        assert!(tau > 0.0);
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let scaled: Vec<f64> = z.row(r).iter().map(|&x| x / tau).collect();
            let lsm = log_softmax_row(&scaled);
            for (c, &qv) in q.row(r).iter().enumerate() {
                if qv > 0.0 {
                    loss += qv * (num::ln(qv) - lsm[c]);
                }
            }
        }
        loss *= tau * tau;
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::KlToTeacher { logits, q, tau })
    }

    pub fn mse_to(&mut self, x: Var, target: Mat) -> Var {
        let xv = self.value(x);
        assert_eq!((xv.rows(), xv.cols()), (target.rows(), target.cols()));
        let inv = 1.0 / xv.cols() as f64;
        let mut loss = 0.0;
        for (a, b) in xv.data().iter().zip(target.data()) {
            let d = a - b;
            loss += d * d * inv;
        }
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::MseTo { x, target })
    }

    /// Runs the backward pass from a `1x1` root and returns one gradient slot
    /// per node (only nodes the root depends on are populated).
    pub fn backward(&self, root: Var) -> Vec<Option<Mat>> {
        let rv = self.value(root);
        assert_eq!((rv.rows(), rv.cols()), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let add_to = |slot: &mut Option<Mat>, delta: Mat| {
            match slot {
                Some(m) => m.add_assign(&delta),
                None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_tb(self.value(*b));
                let db = self.value(*a).matmul_ta(g);
                add_to(&mut grads[a.0], da);
                add_to(&mut grads[b.0], db);
            }
            Op::MatMulTb(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_ta(self.value(*a));
                add_to(&mut grads[a.0], da);
                add_to(&mut grads[b.0], db);
            }
            Op::Add(a, b) => {
                add_to(&mut grads[a.0], g.clone());
                add_to(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, bias) => {
                add_to(&mut grads[a.0], g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    let o = db.row_mut(0);
                    for (x, y) in o.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                add_to(&mut grads[bias.0], db);
            }
            Op::Scale(a, s) => {
                let mut da = g.clone();
                da.scale_assign(*s);
                add_to(&mut grads[a.0], da);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let mut da = Mat::zeros(xv.rows(), xv.cols());
                for (o, (x, gg)) in
                    da.data_mut().iter_mut().zip(xv.data().iter().zip(g.data()))
                {
                    *o = gelu_grad(*x) * gg;
                }
                add_to(&mut grads[a.0], da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols();
                let mut dx = Mat::zeros(xv.rows(), d);
                let mut dgamma = Mat::zeros(1, d);
                let mut dbeta = Mat::zeros(1, d);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, rstd) = row_moments(row);
                    let grow = g.row(r);
                    // gy = g * gamma; dx = (gy - mean(gy) - xhat * mean(gy*xhat)) * rstd
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let gy = grow[c] * gv.at(0, c);
                        mean_gy += gy;
                        mean_gyx += gy * xhat;
                        *dgamma.at_mut(0, c) += grow[c] * xhat;
                        *dbeta.at_mut(0, c) += grow[c];
                    }
                    mean_gy /= d as f64;
                    mean_gyx /= d as f64;
                    let o = dx.row_mut(r);
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let gy = grow[c] * gv.at(0, c);
                        o[c] = (gy - mean_gy - xhat * mean_gyx) * rstd;
                    }
                }
                add_to(&mut grads[x.0], dx);
                add_to(&mut grads[gamma.0], dgamma);
                add_to(&mut grads[beta.0], dbeta);
            }
            Op::CausalSoftmax { x } | Op::RowSoftmax(x) => {
                let p = &self.nodes[id].value;
                let mut dx = Mat::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let prow = p.row(r);
                    let grow = g.row(r);
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let o = dx.row_mut(r);
                    for c in 0..p.cols() {
                        o[c] = prow[c] * (grow[c] - dot);
                    }
                }
                add_to(&mut grads[x.0], dx);
            }
            Op::SliceCols { x, from, to } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*from..*to].copy_from_slice(g.row(r));
                }
                add_to(&mut grads[x.0], dx);
            }
            Op::ConcatCols(xs) => {
                let mut at = 0;
                for &v in xs {
                    let m = self.value(v);
                    let mut dv = Mat::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        dv.row_mut(r).copy_from_slice(&g.row(r)[at..at + m.cols()]);
                    }
                    at += m.cols();
                    add_to(&mut grads[v.0], dv);
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    let o = dx.row_mut(i);
                    for (a, b) in o.iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                add_to(&mut grads[x.0], dx);
            }
            Op::MeanPool2(x) => {
                let xv = self.value(*x);
                let n = xv.rows();
                let mut dx = Mat::zeros(n, xv.cols());
                for gidx in 0..g.rows() {
                    let lo = 2 * gidx;
                    let hi = (lo + 2).min(n);
                    let inv = 1.0 / (hi - lo) as f64;
                    for r in lo..hi {
                        let o = dx.row_mut(r);
                        for (a, b) in o.iter_mut().zip(g.row(gidx)) {
                            *a += b * inv;
                        }
                    }
                }
                add_to(&mut grads[x.0], dx);
            }
            Op::SumScaled(terms) => {
                let gs = g.at(0, 0);
                for &(v, c) in terms {
                    add_to(&mut grads[v.0], Mat::from_vec(1, 1, vec![gs * c]));
                }
            }
            Op::Nll { logits, targets } => {
                let z = self.value(*logits);
                let gs = g.at(0, 0);
                let mut dz = Mat::zeros(z.rows(), z.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let p = softmax_row_prefix(z.row(r), z.cols());
                    let o = dz.row_mut(r);
                    for c in 0..z.cols() {
                        o[c] = gs * (p[c] - f64::from(u8::from(c == t)));
                    }
                }
                add_to(&mut grads[logits.0], dz);
            }
            Op::KlToTeacher { logits, q, tau } => {
                let z = self.value(*logits);
                let gs = g.at(0, 0);
                let mut dz = Mat::zeros(z.rows(), z.cols());
                for r in 0..z.rows() {
                    let scaled: Vec<f64> = z.row(r).iter().map(|&x| x / tau).collect();
                    let p = softmax_row_prefix(&scaled, scaled.len());
                    let o = dz.row_mut(r);
                    for c in 0..z.cols() {
                        o[c] = gs * tau * (p[c] - q.at(r, c));
                    }
                }
                add_to(&mut grads[logits.0], dz);
            }
            Op::MseTo { x, target } => {
                let xv = self.value(*x);
                let gs = g.at(0, 0);
                let inv = 2.0 / xv.cols() as f64;
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for (o, (a, b)) in
                    dx.data_mut().iter_mut().zip(xv.data().iter().zip(target.data()))
                {
                    *o = gs * inv * (a - b);
                }
                add_to(&mut grads[x.0], dx);
            }
        }
    }
}

/// Per-row mean and reciprocal standard deviation used by layer norm.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / num::sqrt(var + crate::model::LN_EPS))
}

//! Tape-based reverse-mode automatic differentiation over [`Mat`] values.
//!
//! Every operation is evaluated eagerly when it is recorded; `backward`
//! walks the tape once in reverse. Nodes that cannot reach a trainable leaf
//! are skipped during the backward sweep, so frozen sub-networks only pay
//! for the gradients that actually flow through them.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{conv_row, matmul_row_acc, sigmoid, softmax_row, tap_offset, Mat, Padding};

/// Probability floor inside the frame cross entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Conv {
        x: Var,
        w: Var,
        width: usize,
        dilation: usize,
        padding: Padding,
    },
    AddRow(Var, Var),
    SelectRow(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AffineCols(Var, Vec<f64>),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ShiftDown(Var, usize),
    ReverseRows(Var),
    RepeatRows(Var, Vec<usize>),
    GatherRows(Var, Vec<Option<usize>>),
    QrnnScan(Var, Var),
    Softmax(Var),
    Mae(Var, Var),
    FrameCe(Var, Vec<usize>),
    Kld {
        mu_p: Var,
        std_p: Var,
        mu_q: Var,
        std_q: Var,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Which parameters of a [`ParamStore`] receive gradients.
#[derive(Debug, Clone, Default)]
pub enum Trainable {
    /// Every parameter.
    #[default]
    All,
    /// No parameter (inference, or gradients w.r.t. explicit leaves only).
    None,
    /// Only parameters whose names start with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<S: AsRef<str>>(ps: &[S]) -> Self {
        Trainable::Prefixes(ps.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Trainable,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    per_node: Vec<Option<Mat>>,
    params: BTreeMap<String, Mat>,
}

impl Grads {
    /// Gradient with respect to any node (zero-shaped `None` if unreached).
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.per_node[v.0].as_ref()
    }

    /// Parameter gradients, summed over every use of each parameter.
    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.params
    }
}

impl Graph {
    pub fn new(trainable: Trainable) -> Self {
        Graph {
            nodes: Vec::new(),
            trainable,
        }
    }

    /// A graph on which no parameter is trainable.
    pub fn inference() -> Self {
        Graph::new(Trainable::None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient is requested.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let ng = self.trainable.allows(name);
        Ok(self.push(value, Op::Param(name.to_string()), ng))
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (x, wm) = (self.value(a), self.value(w));
        assert_eq!(x.cols(), wm.rows(), "matmul shape mismatch");
        let mut out = Mat::zeros(x.rows(), wm.cols());
        for t in 0..x.rows() {
            matmul_row_acc(x.row(t), wm, out.row_mut(t));
        }
        let ng = self.ng(a) || self.ng(w);
        self.push(out, Op::MatMul(a, w), ng)
    }

    pub fn conv(&mut self, x: Var, w: Var, width: usize, dilation: usize, padding: Padding) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(wm.rows(), width * xm.cols(), "conv weight shape mismatch");
        let t_len = xm.rows() as isize;
        let mut out = Mat::zeros(xm.rows(), wm.cols());
        for t in 0..xm.rows() {
            conv_row(
                |s| (s >= 0 && s < t_len).then(|| xm.row(s as usize)),
                t,
                wm,
                width,
                dilation,
                padding,
                out.row_mut(t),
            );
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                width,
                dilation,
                padding,
            },
            ng,
        )
    }

    /// `x + b` with `b` (1×C) broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xm, bm) = (self.value(x), self.value(b));
        assert_eq!(bm.rows(), 1);
        assert_eq!(xm.cols(), bm.cols(), "add_row shape mismatch");
        let mut out = xm.clone();
        let br = bm.row(0);
        for t in 0..out.rows() {
            for (o, &bv) in out.row_mut(t).iter_mut().zip(br) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    /// Row `k` of `table` as a 1×C matrix.
    pub fn select_row(&mut self, table: Var, k: usize) -> Var {
        let out = self.value(table).slice_rows(k, 1);
        let ng = self.ng(table);
        self.push(out, Op::SelectRow(table, k), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "elementwise shape mismatch");
        let data = am.data().iter().zip(bm.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Mat::from_vec(am.rows(), am.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// `x[t, c] · scale[c] + shift[c]` with constant per-column coefficients.
    pub fn affine_cols(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        let am = self.value(a);
        assert!(
            scale.len() == am.cols() && shift.len() == am.cols(),
            "affine_cols shape mismatch"
        );
        let mut out = am.clone();
        for t in 0..out.rows() {
            for ((o, &s), &b) in out.row_mut(t).iter_mut().zip(scale).zip(shift) {
                *o = *o * s + b;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::AffineCols(a, scale.to_vec()), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows(), bm.rows(), "concat row mismatch");
        let cols = am.cols() + bm.cols();
        let mut out = Mat::zeros(am.rows(), cols);
        for t in 0..am.rows() {
            let r = out.row_mut(t);
            r[..am.cols()].copy_from_slice(am.row(t));
            r[am.cols()..].copy_from_slice(bm.row(t));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = self.value(a);
        assert!(start <= end && end <= am.cols());
        let mut out = Mat::zeros(am.rows(), end - start);
        for t in 0..am.rows() {
            out.row_mut(t).copy_from_slice(&am.row(t)[start..end]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Row `t` of the output is row `t - n` of the input (zeros before).
    pub fn shift_down(&mut self, a: Var, n: usize) -> Var {
        let am = self.value(a);
        let mut out = Mat::zeros(am.rows(), am.cols());
        for t in n..am.rows() {
            out.row_mut(t).copy_from_slice(am.row(t - n));
        }
        let ng = self.ng(a);
        self.push(out, Op::ShiftDown(a, n), ng)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let n = am.rows();
        let mut out = Mat::zeros(n, am.cols());
        for t in 0..n {
            out.row_mut(t).copy_from_slice(am.row(n - 1 - t));
        }
        let ng = self.ng(a);
        self.push(out, Op::ReverseRows(a), ng)
    }

    /// Repeats input row `i` `counts[i]` times.
    pub fn repeat_rows(&mut self, a: Var, counts: &[usize]) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows(), counts.len(), "repeat count length mismatch");
        let total: usize = counts.iter().sum();
        let mut out = Mat::zeros(total, am.cols());
        let mut t = 0;
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.row_mut(t).copy_from_slice(am.row(i));
                t += 1;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatRows(a, counts.to_vec()), ng)
    }

    /// Output row `t` is `table[ids[t]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Var {
        let tm = self.value(table);
        let mut out = Mat::zeros(ids.len(), tm.cols());
        for (t, id) in ids.iter().enumerate() {
            if let Some(i) = id {
                out.row_mut(t).copy_from_slice(tm.row(*i));
            }
        }
        let ng = self.ng(table);
        self.push(out, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Forget-gate recurrence `h_t = f_t ⊙ h_{t-1} + (1 - f_t) ⊙ z_t`, `h_{-1} = 0`.
    pub fn qrnn_scan(&mut self, z: Var, f: Var) -> Var {
        let (zm, fm) = (self.value(z), self.value(f));
        assert_eq!(zm.shape(), fm.shape(), "qrnn shape mismatch");
        let mut out = Mat::zeros(zm.rows(), zm.cols());
        let mut prev = vec![0.0; zm.cols()];
        for t in 0..zm.rows() {
            let row = out.row_mut(t);
            for c in 0..row.len() {
                let ft = fm.get(t, c);
                row[c] = ft * prev[c] + (1.0 - ft) * zm.get(t, c);
            }
            prev.copy_from_slice(row);
        }
        let ng = self.ng(z) || self.ng(f);
        self.push(out, Op::QrnnScan(z, f), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = Mat::zeros(am.rows(), am.cols());
        for t in 0..am.rows() {
            softmax_row(am.row(t), out.row_mut(t));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Mean absolute error (1×1).
    pub fn mae(&mut self, pred: Var, target: Var) -> Var {
        let v = mae_value(self.value(pred), self.value(target));
        let ng = self.ng(pred) || self.ng(target);
        self.push(Mat::scalar(v), Op::Mae(pred, target), ng)
    }

    /// Mean over frames of `-ln max(p[t, label_t], PROB_FLOOR)` (1×1).
    pub fn frame_ce(&mut self, probs: Var, labels: &[usize]) -> Var {
        let v = frame_ce_value(self.value(probs), labels);
        let ng = self.ng(probs);
        self.push(Mat::scalar(v), Op::FrameCe(probs, labels.to_vec()), ng)
    }

    /// Mean closed-form KL(p || q) between diagonal Gaussians (1×1).
    pub fn kld(&mut self, mu_p: Var, std_p: Var, mu_q: Var, std_q: Var) -> Var {
        let v = kld_value(self.value(mu_p), self.value(std_p), self.value(mu_q), self.value(std_q));
        let ng = self.ng(mu_p) || self.ng(std_p) || self.ng(mu_q) || self.ng(std_q);
        self.push(
            Mat::scalar(v),
            Op::Kld {
                mu_p,
                std_p,
                mu_q,
                std_q,
            },
            ng,
        )
    }

    /// Mean of all entries (1×1).
    pub fn mean(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let v = am.data().iter().sum::<f64>() / am.len() as f64;
        let ng = self.ng(a);
        self.push(Mat::scalar(v), Op::Mean(a), ng)
    }

    /// Reverse sweep from the scalar node `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[root.0] = Some(Mat::scalar(1.0));
        let mut params: BTreeMap<String, Mat> = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Param(name) => {
                    match params.get_mut(name) {
                        Some(acc) => acc.add_assign(&dy),
                        None => {
                            params.insert(name.clone(), dy.clone());
                        }
                    }
                    grads[idx] = Some(dy);
                    continue;
                }
                op => self.backprop(op, &node.value, &dy, &mut grads),
            }
            grads[idx] = Some(dy);
        }
        Grads {
            per_node: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Mat::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(&self, op: &Op, y: &Mat, dy: &Mat, grads: &mut [Option<Mat>]) {
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, w) => {
                let (am, wm) = (self.value(a), self.value(w));
                self.acc(grads, a, |da| {
                    let (cin, cout) = wm.shape();
                    for t in 0..am.rows() {
                        let dyr = dy.row(t);
                        let dar = da.row_mut(t);
                        for i in 0..cin {
                            let wr = &wm.data()[i * cout..(i + 1) * cout];
                            dar[i] += dot(dyr, wr);
                        }
                    }
                });
                self.acc(grads, w, |dw| {
                    for t in 0..am.rows() {
                        let dyr = dy.row(t);
                        for (i, &x) in am.row(t).iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            axpy(x, dyr, dw.row_mut(i));
                        }
                    }
                });
            }
            Op::Conv {
                x,
                w,
                width,
                dilation,
                padding,
            } => {
                let (xm, wm) = (self.value(x), self.value(w));
                let t_len = xm.rows() as isize;
                let cin = xm.cols();
                let cout = wm.cols();
                self.acc(grads, x, |dx| {
                    for t in 0..xm.rows() {
                        let dyr = dy.row(t);
                        for k in 0..width {
                            let s = t as isize + tap_offset(k, width, dilation, padding);
                            if s < 0 || s >= t_len {
                                continue;
                            }
                            let dxr = dx.row_mut(s as usize);
                            for i in 0..cin {
                                let base = (k * cin + i) * cout;
                                dxr[i] += dot(dyr, &wm.data()[base..base + cout]);
                            }
                        }
                    }
                });
                self.acc(grads, w, |dw| {
                    for t in 0..xm.rows() {
                        let dyr = dy.row(t);
                        for k in 0..width {
                            let s = t as isize + tap_offset(k, width, dilation, padding);
                            if s < 0 || s >= t_len {
                                continue;
                            }
                            for (i, &xv) in xm.row(s as usize).iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                axpy(xv, dyr, dw.row_mut(k * cin + i));
                            }
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(grads, x, |dx| dx.add_assign(dy));
                self.acc(grads, b, |db| {
                    for t in 0..dy.rows() {
                        axpy(1.0, dy.row(t), db.row_mut(0));
                    }
                });
            }
            Op::SelectRow(table, k) => {
                self.acc(grads, table, |dt| axpy(1.0, dy.row(0), dt.row_mut(k)));
            }
            Op::Add(a, b) => {
                self.acc(grads, a, |da| da.add_assign(dy));
                self.acc(grads, b, |db| db.add_assign(dy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, |da| da.add_assign(dy));
                self.acc(grads, b, |db| axpy(-1.0, dy.data(), db.data_mut()));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(a), self.value(b));
                self.acc(grads, a, |da| {
                    for ((d, &g), &o) in da.data_mut().iter_mut().zip(dy.data()).zip(bm.data()) {
                        *d += g * o;
                    }
                });
                self.acc(grads, b, |db| {
                    for ((d, &g), &o) in db.data_mut().iter_mut().zip(dy.data()).zip(am.data()) {
                        *d += g * o;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, a, |da| axpy(s, dy.data(), da.data_mut())),
            Op::AffineCols(a, ref scale) => self.acc(grads, a, |da| {
                for t in 0..dy.rows() {
                    for ((d, &g), &s) in da.row_mut(t).iter_mut().zip(dy.row(t)).zip(scale) {
                        *d += g * s;
                    }
                }
            }),
            Op::OneMinus(a) => self.acc(grads, a, |da| axpy(-1.0, dy.data(), da.data_mut())),
            Op::Tanh(a) => self.acc(grads, a, |da| {
                for ((d, &g), &yv) in da.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *d += g * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, a, |da| {
                for ((d, &g), &yv) in da.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *d += g * yv * (1.0 - yv);
                }
            }),
            Op::Exp(a) => self.acc(grads, a, |da| {
                for ((d, &g), &yv) in da.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *d += g * yv;
                }
            }),
            Op::Relu(a) => {
                let am = self.value(a);
                self.acc(grads, a, |da| {
                    for ((d, &g), &x) in da.data_mut().iter_mut().zip(dy.data()).zip(am.data()) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                })
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                self.acc(grads, a, |da| {
                    for t in 0..dy.rows() {
                        axpy(1.0, &dy.row(t)[..ca], da.row_mut(t));
                    }
                });
                self.acc(grads, b, |db| {
                    for t in 0..dy.rows() {
                        axpy(1.0, &dy.row(t)[ca..], db.row_mut(t));
                    }
                });
            }
            Op::SliceCols(a, start) => self.acc(grads, a, |da| {
                let w = dy.cols();
                for t in 0..dy.rows() {
                    axpy(1.0, dy.row(t), &mut da.row_mut(t)[start..start + w]);
                }
            }),
            Op::SliceRows(a, start) => self.acc(grads, a, |da| {
                for t in 0..dy.rows() {
                    axpy(1.0, dy.row(t), da.row_mut(start + t));
                }
            }),
            Op::ShiftDown(a, n) => self.acc(grads, a, |da| {
                for t in n..dy.rows() {
                    axpy(1.0, dy.row(t), da.row_mut(t - n));
                }
            }),
            Op::ReverseRows(a) => self.acc(grads, a, |da| {
                let n = dy.rows();
                for t in 0..n {
                    axpy(1.0, dy.row(n - 1 - t), da.row_mut(t));
                }
            }),
            Op::RepeatRows(a, ref counts) => self.acc(grads, a, |da| {
                let mut t = 0;
                for (i, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        axpy(1.0, dy.row(t), da.row_mut(i));
                        t += 1;
                    }
                }
            }),
            Op::GatherRows(table, ref ids) => self.acc(grads, table, |dt| {
                for (t, id) in ids.iter().enumerate() {
                    if let Some(i) = id {
                        axpy(1.0, dy.row(t), dt.row_mut(*i));
                    }
                }
            }),
            Op::QrnnScan(z, f) => {
                let (zm, fm) = (self.value(z), self.value(f));
                let (rows, cols) = zm.shape();
                let mut dz = Mat::zeros(rows, cols);
                let mut df = Mat::zeros(rows, cols);
                let mut carry = vec![0.0; cols];
                for t in (0..rows).rev() {
                    for c in 0..cols {
                        let g = dy.get(t, c) + carry[c];
                        let ft = fm.get(t, c);
                        let prev = if t > 0 { y.get(t - 1, c) } else { 0.0 };
                        dz.set(t, c, g * (1.0 - ft));
                        df.set(t, c, g * (prev - zm.get(t, c)));
                        carry[c] = g * ft;
                    }
                }
                self.acc(grads, z, |d| d.add_assign(&dz));
                self.acc(grads, f, |d| d.add_assign(&df));
            }
            Op::Softmax(a) => self.acc(grads, a, |da| {
                for t in 0..y.rows() {
                    let (yr, dyr) = (y.row(t), dy.row(t));
                    let s = dot(yr, dyr);
                    for ((d, &yv), &g) in da.row_mut(t).iter_mut().zip(yr).zip(dyr) {
                        *d += yv * (g - s);
                    }
                }
            }),
            Op::Mae(p, q) => {
                let (pm, qm) = (self.value(p), self.value(q));
                let g = dy.item() / pm.len() as f64;
                let sign = |a: f64, b: f64| {
                    if a > b {
                        g
                    } else if a < b {
                        -g
                    } else {
                        0.0
                    }
                };
                self.acc(grads, p, |dp| {
                    for ((d, &a), &b) in dp.data_mut().iter_mut().zip(pm.data()).zip(qm.data()) {
                        *d += sign(a, b);
                    }
                });
                self.acc(grads, q, |dq| {
                    for ((d, &a), &b) in dq.data_mut().iter_mut().zip(pm.data()).zip(qm.data()) {
                        *d -= sign(a, b);
                    }
                });
            }
            Op::FrameCe(p, ref labels) => {
                let pm = self.value(p);
                let g = dy.item() / labels.len() as f64;
                self.acc(grads, p, |dp| {
                    for (t, &l) in labels.iter().enumerate() {
                        let pv = pm.get(t, l);
                        if pv > PROB_FLOOR {
                            dp.row_mut(t)[l] -= g / pv;
                        }
                    }
                });
            }
            Op::Kld {
                mu_p,
                std_p,
                mu_q,
                std_q,
            } => {
                let (mp, sp, mq, sq) = (self.value(mu_p), self.value(std_p), self.value(mu_q), self.value(std_q));
                let g = dy.item() / mp.len() as f64;
                let n = mp.len();
                let mut d_mp = vec![0.0; n];
                let mut d_sp = vec![0.0; n];
                let mut d_mq = vec![0.0; n];
                let mut d_sq = vec![0.0; n];
                for i in 0..n {
                    let (a, s1, b, s2) = (mp.data()[i], sp.data()[i], mq.data()[i], sq.data()[i]);
                    let v2 = s2 * s2;
                    let diff = a - b;
                    d_mp[i] = g * diff / v2;
                    d_mq[i] = -g * diff / v2;
                    d_sp[i] = g * (-1.0 / s1 + s1 / v2);
                    d_sq[i] = g * (1.0 / s2 - (s1 * s1 + diff * diff) / (v2 * s2));
                }
                for (v, d) in [(mu_p, d_mp), (std_p, d_sp), (mu_q, d_mq), (std_q, d_sq)] {
                    self.acc(grads, v, |m| axpy(1.0, &d, m.data_mut()));
                }
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let g = dy.item() / n;
                self.acc(grads, a, |da| da.data_mut().iter_mut().for_each(|d| *d += g));
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Mean of `|pred - target|` over all entries.
pub fn mae_value(pred: &Mat, target: &Mat) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "mae shape mismatch");
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    s / pred.len() as f64
}

pub fn frame_ce_value(probs: &Mat, labels: &[usize]) -> f64 {
    assert_eq!(probs.rows(), labels.len(), "frame_ce length mismatch");
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(t, &l)| -probs.get(t, l).max(PROB_FLOOR).ln())
        .sum();
    s / labels.len() as f64
}

/// Closed-form `KL(N(mu_p, std_p²) || N(mu_q, std_q²))` averaged over entries.
pub fn kld_value(mu_p: &Mat, std_p: &Mat, mu_q: &Mat, std_q: &Mat) -> f64 {
    let n = mu_p.len();
    assert!(
        std_p.len() == n && mu_q.len() == n && std_q.len() == n,
        "kld shape mismatch"
    );
    let mut s = 0.0;
    for i in 0..n {
        s += kld_scalar(mu_p.data()[i], std_p.data()[i], mu_q.data()[i], std_q.data()[i]);
    }
    s / n as f64
}

#[inline]
pub fn kld_scalar(mu_p: f64, std_p: f64, mu_q: f64, std_q: f64) -> f64 {
    let diff = mu_p - mu_q;
    (std_q / std_p).ln() + (std_p * std_p + diff * diff) / (2.0 * std_q * std_q) - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::from_vec(1, 1, vec![3.0]));
        let mut g = Graph::new(Trainable::All);
        let x = g.constant(Mat::scalar(2.0));
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        let a = g.matmul(x, w1);
        let b = g.matmul(x, w2);
        let s = g.add(a, b);
        let grads = g.backward(s);
        assert_eq!(grads.params()["w"].item(), 4.0);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Mat::scalar(1.0));
        store.insert("dec.w", Mat::scalar(1.0));
        let mut g = Graph::new(Trainable::prefixes(&["dec."]));
        let x = g.constant(Mat::scalar(2.0));
        let e = g.param(&store, "enc.w").unwrap();
        let d = g.param(&store, "dec.w").unwrap();
        let h = g.matmul(x, e);
        let y = g.matmul(h, d);
        let grads = g.backward(y);
        assert!(grads.params().contains_key("dec.w"));
        assert!(!grads.params().contains_key("enc.w"));
    }

    #[test]
    fn qrnn_scan_hand_example() {
        let mut g = Graph::inference();
        let z = g.constant(Mat::from_vec(2, 1, vec![1.0, 2.0]));
        let f = g.constant(Mat::from_vec(2, 1, vec![0.5, 0.25]));
        let h = g.qrnn_scan(z, f);
        // h0 = 0.5·0 + 0.5·1 = 0.5 ; h1 = 0.25·0.5 + 0.75·2 = 1.625
        assert_eq!(g.value(h).data(), &[0.5, 1.625]);
    }
}

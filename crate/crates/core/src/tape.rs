//! A small reverse-mode automatic differentiation tape over dense 2-D
//! matrices. It carries exactly the operations the micro-encoder and the
//! training objectives need.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    WeightedNegLog {
        alpha: Var,
        weights: Mat,
        floor: f64,
    },
    PairwiseHinge {
        scores: Var,
        pos: Vec<usize>,
        neg: Vec<usize>,
        margin: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to a recorded node, if it participated.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient accumulated for a parameter slot.
    pub fn param(&self, slot: usize) -> Option<&Mat> {
        self.params.get(slot).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn softmax_in_place(mut m: Mat, axis: Axis) -> Mat {
    for mut lane in m.lanes_mut(axis) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    m
}

/// Numerically stable softmax along each row.
pub fn softmax_rows(m: &Mat) -> Mat {
    softmax_in_place(m.clone(), Axis(1))
}

/// Numerically stable softmax down each column.
pub fn softmax_cols(m: &Mat) -> Mat {
    softmax_in_place(m.clone(), Axis(0))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) - z*label + ln(1 + exp(-|z|))`
pub fn bce_with_logits(z: f64, label: f64) -> f64 {
    z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects gradients but is not a parameter slot.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter identified by `slot` in the caller's layout.
    pub fn param(&mut self, slot: usize, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param(slot), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds the `1×c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a row vector");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let v = softmax_cols(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxCols(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(v, Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// Column-wise maximum as a `1×c` row; ties resolve to the lowest row.
    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((1, xv.ncols()));
        let mut argmax = Vec::with_capacity(xv.ncols());
        for (k, col) in xv.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, v) in col.iter().enumerate() {
                if *v > col[best] {
                    best = i;
                }
            }
            out[[0, k]] = col[best];
            argmax.push(best);
        }
        let rg = self.rg(x);
        self.push(out, Op::ColMax { x, argmax }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    /// Summed binary cross-entropy of a `k×1` logit column against labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), labels.len(), "bce label count");
        let loss: f64 = z.iter().zip(labels).map(|(z, l)| bce_with_logits(*z, *l)).sum();
        let rg = self.rg(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// `-Σ w · ln(max(α, floor))`
    pub fn weighted_neg_log(&mut self, alpha: Var, weights: &Mat, floor: f64) -> Var {
        let a = self.value(alpha);
        assert_eq!(a.dim(), weights.dim(), "weighted_neg_log shape");
        let loss: f64 = a.iter().zip(weights.iter()).map(|(a, w)| -w * a.max(floor).ln()).sum();
        let rg = self.rg(alpha);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::WeightedNegLog {
                alpha,
                weights: weights.clone(),
                floor,
            },
            rg,
        )
    }

    /// `Σ_{p∈pos, n∈neg} max(0, margin - s_p + s_n)` over a `1×k` score row.
    pub fn pairwise_hinge(&mut self, scores: Var, pos: &[usize], neg: &[usize], margin: f64) -> Var {
        let s = self.value(scores);
        let mut loss = 0.0;
        for &p in pos {
            for &n in neg {
                loss += (margin - s[[0, p]] + s[[0, n]]).max(0.0);
            }
        }
        let rg = self.rg(scores);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::PairwiseHinge {
                scores,
                pos: pos.to_vec(),
                neg: neg.to_vec(),
                margin,
            },
            rg,
        )
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, dy.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, dy.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, dy.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, dy.clone());
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, dy.clone());
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.clone() * *s),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gamma) {
                        acc(&mut grads, *gamma, (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let dxhat = &dy * self.value(*gamma);
                        let c = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.dim());
                        for r in 0..dxhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dh_xh = dh.dot(&xh);
                            let scale = inv_std[r] / c;
                            for j in 0..dh.len() {
                                dx[[r, j]] = scale * (c * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy.clone();
                    dx.zip_mut_with(xv, |d, &x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) | Op::SoftmaxCols(x) => {
                    let axis = if matches!(node.op, Op::SoftmaxRows(_)) {
                        Axis(1)
                    } else {
                        Axis(0)
                    };
                    let y = &node.value;
                    let mut dx = &dy * y;
                    for (mut lane, ylane) in dx.lanes_mut(axis).into_iter().zip(y.lanes(axis)) {
                        let s = lane.sum();
                        lane.zip_mut_with(&ylane, |d, &yv| *d -= yv * s);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(&mut grads, *p, dy.slice(s![.., offset..offset + w]).to_owned());
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &dy.row(i);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ColMax { x, argmax } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (k, &r) in argmax.iter().enumerate() {
                        dx[[r, k]] += dy[[0, k]];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let dx = Mat::from_elem(self.value(*x).dim(), dy[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::BceWithLogits { logits, labels } => {
                    let z = self.value(*logits);
                    let g = dy[[0, 0]];
                    let mut dz = Mat::zeros(z.dim());
                    for ((d, zv), l) in dz.iter_mut().zip(z.iter()).zip(labels) {
                        *d = g * (sigmoid(*zv) - l);
                    }
                    acc(&mut grads, *logits, dz);
                }
                Op::WeightedNegLog { alpha, weights, floor } => {
                    let a = self.value(*alpha);
                    let g = dy[[0, 0]];
                    let mut da = Mat::zeros(a.dim());
                    ndarray::Zip::from(&mut da).and(a).and(weights).for_each(|d, &a, &w| {
                        if a > *floor {
                            *d = -g * w / a;
                        }
                    });
                    acc(&mut grads, *alpha, da);
                }
                Op::PairwiseHinge {
                    scores,
                    pos,
                    neg,
                    margin,
                } => {
                    let sv = self.value(*scores);
                    let g = dy[[0, 0]];
                    let mut ds = Mat::zeros(sv.dim());
                    for &p in pos {
                        for &n in neg {
                            if margin - sv[[0, p]] + sv[[0, n]] > 0.0 {
                                ds[[0, p]] -= g;
                                ds[[0, n]] += g;
                            }
                        }
                    }
                    acc(&mut grads, *scores, ds);
                }
            }
            grads[i] = Some(dy);
        }

        let slots = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(s) => Some(s + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut params: Vec<Option<Mat>> = (0..slots).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(slot), Some(g)) = (&node.op, &grads[i]) {
                match &mut params[*slot] {
                    Some(p) => *p += g,
                    empty => *empty = Some(g.clone()),
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}

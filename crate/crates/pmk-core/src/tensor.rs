//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a single-use tape: every operation appends a node holding
//! its forward value and enough context to push gradients back to its
//! parents. Training code builds a fresh graph per step, calls
//! [`Graph::backward`] on a scalar loss node, and reads gradients out of the
//! returned [`Grads`].
//!
//! Everything is `f64` and single-threaded, so a fixed seed reproduces runs
//! bit for bit.

use ndarray::{Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of exact GELU.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[m,n] + [1,n]`, bias broadcast over rows.
    AddRowBias(NodeId, NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Sqr(NodeId),
    Exp(NodeId),
    SumAll(NodeId),
    /// Per-row maximum of `[m,n]` -> `[m,1]`; argmax column cached per row.
    RowMax(NodeId, Vec<usize>),
    /// Row-wise softmax; the node value is the cached output.
    SoftmaxRows(NodeId),
    /// Mean cross-entropy of row logits against integer labels; softmax cached.
    CrossEntropyMean(NodeId, Vec<usize>, Array2<f64>),
    /// Mask entries are either `0` or `1/(1-p)`.
    Dropout(NodeId, Array2<f64>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Contiguous row slice starting at the cached offset.
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        /// im2col matrix `[cin*kh*kw, oh*ow]` cached from the forward pass.
        cols: Array2<f64>,
    },
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized input (pre-affine) cached from the forward pass.
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    /// Forward takes the externally supplied value; backward is the identity
    /// into the parent (straight-through estimator).
    StraightThrough(NodeId),
    /// Multiply a matrix by a `[1,1]` scalar node.
    MulScalarNode(NodeId, NodeId),
}

/// Spatial layout of a 2D convolution over a `[cin, h*w]` input node.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. the given node; zeros if the node never
    /// received a gradient.
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

/// Single-use reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.nrows(), v.ncols())
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), self.ng(a) || self.ng(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), self.ng(a) || self.ng(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), self.ng(a) || self.ng(b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), self.ng(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a, c), self.ng(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::Matmul(a, b), self.ng(a) || self.ng(b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), self.ng(a))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.nrows(), 1, "bias must be a row vector");
        assert_eq!(b.ncols(), self.value(a).ncols(), "bias width mismatch");
        let v = self.value(a) + b;
        self.push(v, Op::AddRowBias(a, bias), self.ng(a) || self.ng(bias))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a), self.ng(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.ng(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a), self.ng(a))
    }

    pub fn sqr(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Sqr(a), self.ng(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), self.ng(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(
            Array2::from_elem((1, 1), s),
            Op::SumAll(a),
            self.ng(a),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Array2::zeros((v.nrows(), 1));
        let mut argmax = Vec::with_capacity(v.nrows());
        for (i, row) in v.rows().into_iter().enumerate() {
            let mut best = 0usize;
            let mut bv = row[0];
            for (j, &x) in row.iter().enumerate() {
                if x > bv {
                    bv = x;
                    best = j;
                }
            }
            out[(i, 0)] = bv;
            argmax.push(best);
        }
        self.push(out, Op::RowMax(a, argmax), self.ng(a))
    }

    /// Row-wise softmax. `-inf` logits quantize to exactly zero weight.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(out, Op::SoftmaxRows(a), self.ng(a))
    }

    /// Mean cross-entropy of row logits vs integer labels (fused log-softmax).
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let v = self.value(logits);
        assert_eq!(v.nrows(), labels.len(), "one label per logit row");
        let mut probs = v.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
            loss -= row[labels[i]].ln();
        }
        loss /= labels.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropyMean(logits, labels.to_vec(), probs),
            self.ng(logits),
        )
    }

    /// Inverted dropout with keep-prob scaling; `mask` entries are 0 or 1/(1-p).
    pub fn dropout_masked(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        assert_eq!(mask.dim(), self.value(a).dim(), "dropout mask shape");
        let v = self.value(a) * &mask;
        self.push(v, Op::Dropout(a, mask), self.ng(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let ncols = self.value(parts[0]).ncols();
        let nrows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((nrows, ncols));
        let mut r = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), ncols, "concat_rows width mismatch");
            v.slice_mut(ndarray::s![r..r + pv.nrows(), ..]).assign(pv);
            r += pv.nrows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let nrows = self.value(parts[0]).nrows();
        let ncols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((nrows, ncols));
        let mut c = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), nrows, "concat_cols height mismatch");
            v.slice_mut(ndarray::s![.., c..c + pv.ncols()]).assign(pv);
            c += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start), self.ng(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a, start), self.ng(a))
    }

    /// Row-major reshape; element order is preserved.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape element count mismatch");
        let flat: Vec<f64> = v.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(v, Op::Reshape(a), self.ng(a))
    }

    /// 2D convolution via im2col. `x` is `[cin, h*w]`, `w` is
    /// `[cout, cin*kh*kw]`, `b` is `[1, cout]`; output is `[cout, oh*ow]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.cin, geom.h * geom.w), "conv input shape");
        assert_eq!(
            self.value(w).dim(),
            (geom.cout, geom.cin * geom.kh * geom.kw),
            "conv weight shape"
        );
        assert_eq!(self.value(b).dim(), (1, geom.cout), "conv bias shape");
        let cols = im2col(xv, geom);
        let mut out = self.value(w).dot(&cols);
        let bv = self.value(b);
        for (mut row, &bias) in out.rows_mut().into_iter().zip(bv.row(0).iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// Layer normalization over the last axis with elementwise affine.
    /// `gamma` and `beta` are `[1, d]` rows.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = &xhat * g + b;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Straight-through: forward takes `value`, backward passes the incoming
    /// gradient to `a` unchanged.
    pub fn straight_through(&mut self, a: NodeId, value: Array2<f64>) -> NodeId {
        assert_eq!(value.dim(), self.value(a).dim(), "straight-through shape");
        self.push(value, Op::StraightThrough(a), self.ng(a))
    }

    /// Multiply every element of `a` by the `[1,1]` node `s`.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).dim(), (1, 1), "scalar node must be [1,1]");
        let sv = self.value(s)[(0, 0)];
        let v = self.value(a) * sv;
        self.push(v, Op::MulScalarNode(a, s), self.ng(a) || self.ng(s))
    }

    /// Backpropagate from a scalar root. Nodes flagged as not needing
    /// gradients are skipped.
    pub fn backward(&mut self, root: NodeId) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            if i == root.0 || matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    acc(grads, *a, g * *c);
                }
            }
            Op::AddScalar(a, _) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
            }
            Op::Matmul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g.t().to_owned());
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*bias) {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *bias, col_sum);
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let d = self.value(*a).mapv(gelu_grad_scalar);
                    acc(grads, *a, g * &d);
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(grads, *a, g * &d);
                }
            }
            Op::Abs(a) => {
                if self.ng(*a) {
                    let s = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(grads, *a, g * &s);
                }
            }
            Op::Sqr(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g * &(self.value(*a) * 2.0));
                }
            }
            Op::Exp(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g * &node.value);
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let (r, c) = self.shape(*a);
                    acc(grads, *a, Array2::from_elem((r, c), g[(0, 0)]));
                }
            }
            Op::RowMax(a, argmax) => {
                if self.ng(*a) {
                    let (r, c) = self.shape(*a);
                    let mut d = Array2::zeros((r, c));
                    for (i, &j) in argmax.iter().enumerate() {
                        d[(i, j)] = g[(i, 0)];
                    }
                    acc(grads, *a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let mut d = g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s: f64 = drow.sum();
                        for (dv, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *dv -= s * yv;
                        }
                    }
                    acc(grads, *a, d);
                }
            }
            Op::CrossEntropyMean(a, labels, probs) => {
                if self.ng(*a) {
                    let n = labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[(i, l)] -= 1.0;
                    }
                    d *= g[(0, 0)] / n;
                    acc(grads, *a, d);
                }
            }
            Op::Dropout(a, mask) => {
                if self.ng(*a) {
                    acc(grads, *a, g * mask);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    if self.ng(p) {
                        let slice = g.slice(ndarray::s![r..r + rows, ..]).to_owned();
                        acc(grads, p, slice);
                    }
                    r += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let cols = self.value(p).ncols();
                    if self.ng(p) {
                        let slice = g.slice(ndarray::s![.., c..c + cols]).to_owned();
                        acc(grads, p, slice);
                    }
                    c += cols;
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let (r, c) = self.shape(*a);
                    let mut d = Array2::zeros((r, c));
                    d.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                        .assign(g);
                    acc(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let (r, c) = self.shape(*a);
                    let mut d = Array2::zeros((r, c));
                    d.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(g);
                    acc(grads, *a, d);
                }
            }
            Op::Reshape(a) => {
                if self.ng(*a) {
                    let (r, c) = self.shape(*a);
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    acc(
                        grads,
                        *a,
                        Array2::from_shape_vec((r, c), flat).expect("reshape grad"),
                    );
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                if self.ng(*w) {
                    acc(grads, *w, g.dot(&cols.t()));
                }
                if self.ng(*b) {
                    let col_sum = g.sum_axis(Axis(1)).insert_axis(Axis(0));
                    acc(grads, *b, col_sum);
                }
                if self.ng(*x) {
                    let dcols = self.value(*w).t().dot(g);
                    acc(grads, *x, col2im(&dcols, *geom));
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.ng(*beta) {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *beta, col_sum);
                }
                if self.ng(*gamma) {
                    let d = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *gamma, d);
                }
                if self.ng(*x) {
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        // dy/dxhat = gamma; standard layer-norm backward per row.
                        let gh: Vec<f64> = (0..xhat.ncols())
                            .map(|c| g[(r, c)] * gv[(0, c)])
                            .collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_gh_xhat: f64 = gh
                            .iter()
                            .zip(xhat.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..xhat.ncols() {
                            dx[(r, c)] = inv_std[r] / d
                                * (d * gh[c] - sum_gh - xhat[(r, c)] * sum_gh_xhat);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::StraightThrough(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
            }
            Op::MulScalarNode(a, s) => {
                let sv = self.value(*s)[(0, 0)];
                if self.ng(*a) {
                    acc(grads, *a, g * sv);
                }
                if self.ng(*s) {
                    let d: f64 = g
                        .iter()
                        .zip(self.value(*a).iter())
                        .map(|(gv, av)| gv * av)
                        .sum();
                    acc(grads, *s, Array2::from_elem((1, 1), d));
                }
            }
        }
    }
}

fn im2col(x: &Array2<f64>, geom: ConvGeom) -> Array2<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut cols = Array2::zeros((geom.cin * geom.kh * geom.kw, oh * ow));
    for c in 0..geom.cin {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] =
                            x[(c, iy as usize * geom.w + ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, geom: ConvGeom) -> Array2<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut dx = Array2::zeros((geom.cin, geom.h * geom.w));
    for c in 0..geom.cin {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        dx[(c, iy as usize * geom.w + ix as usize)] +=
                            dcols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_forward_matches_scalar_loop() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = array![[7.0, 8.0, 9.0], [10.0, 11.0, 12.0]];
        let mut g = Graph::new();
        let an = g.leaf(a.clone());
        let bn = g.leaf(b.clone());
        let c = g.matmul(an, bn);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..2 {
                    s += a[(i, k)] * b[(k, j)];
                }
                assert!((g.value(c)[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_through_matmul_sum() {
        // d(sum(A B))/dA = ones * B^T, d/dB = A^T * ones
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let mut g = Graph::new();
        let an = g.leaf(a.clone());
        let bn = g.leaf(b.clone());
        let c = g.matmul(an, bn);
        let loss = g.sum_all(c);
        let mut grads = g.backward(loss);
        let ga = grads.take(an).unwrap();
        let gb = grads.take(bn).unwrap();
        let ones = Array2::from_elem((2, 2), 1.0);
        assert!((&ga - &ones.dot(&b.t())).iter().all(|d| d.abs() < 1e-12));
        assert!((&gb - &a.t().dot(&ones)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_are_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, f64::NEG_INFINITY, 3.0]]);
        let y = g.softmax_rows(x);
        let v = g.value(y);
        assert_eq!(v[(0, 1)], 0.0);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new();
        let t = g.leaf(array![[1.0, 2.0]]);
        let quantized = array![[0.0, 3.0]];
        let z = g.straight_through(t, quantized.clone());
        assert_eq!(g.value(z), &quantized);
        let s = g.sum_all(z);
        let doubled = g.scale(s, 2.0);
        let mut grads = g.backward(doubled);
        let gt = grads.take(t).unwrap();
        assert_eq!(gt, array![[2.0, 2.0]]);
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        // 1x1 kernel with weight 1 and zero bias is the identity map.
        let x = Array2::from_shape_fn((1, 9), |(_, i)| i as f64);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let w = g.leaf(Array2::from_elem((1, 1), 1.0));
        let b = g.leaf(Array2::zeros((1, 1)));
        let geom = ConvGeom {
            cin: 1,
            h: 3,
            w: 3,
            cout: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
        };
        let y = g.conv2d(xn, w, b, geom);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv2d_matches_direct_convolution_loop() {
        // 2x2 input, 3x3 kernel, pad 1, stride 1 -> 2x2 output; direct oracle.
        let x = array![[1.0, 2.0, 3.0, 4.0]]; // [1, 2*2]
        let wv: Vec<f64> = (0..9).map(|i| (i as f64) * 0.1 - 0.3).collect();
        let w = Array2::from_shape_vec((1, 9), wv.clone()).unwrap();
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.leaf(w);
        let bn = g.leaf(Array2::from_elem((1, 1), 0.5));
        let geom = ConvGeom {
            cin: 1,
            h: 2,
            w: 2,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let y = g.conv2d(xn, wn, bn, geom);
        let xm = |r: isize, c: isize| -> f64 {
            if r < 0 || r > 1 || c < 0 || c > 1 {
                0.0
            } else {
                x[(0, (r * 2 + c) as usize)]
            }
        };
        for oy in 0..2isize {
            for ox in 0..2isize {
                let mut s = 0.5;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        s += wv[(ky * 3 + kx) as usize] * xm(oy + ky - 1, ox + kx - 1);
                    }
                }
                assert!(
                    (g.value(y)[(0, (oy * 2 + ox) as usize)] - s).abs() < 1e-12,
                    "conv mismatch at ({oy},{ox})"
                );
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_v() {
        let mut g = Graph::new();
        let logits = g.leaf(Array2::zeros((4, 8)));
        let loss = g.cross_entropy_mean(logits, &[0, 1, 2, 3]);
        assert!((g.scalar(loss) - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(array![[2.0]]);
        let c = g.constant(array![[3.0]]);
        let y = g.mul(a, c);
        let mut grads = g.backward(y);
        assert!(grads.take(c).is_none());
        assert_eq!(grads.take(a).unwrap()[(0, 0)], 3.0);
    }
}

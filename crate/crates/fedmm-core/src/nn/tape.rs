//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its value and the operation that produced it. [`Tape::backward`]
//! seeds the scalar loss with gradient 1 and walks the list in reverse,
//! accumulating gradients into every node on the path. Parameter leaves are
//! wired through [`Bound`], which maps tape nodes back to [`ParamSet`]
//! entries when the pass is done.
//!
//! The op vocabulary is intentionally small: affine pieces, activations,
//! row gathers, reductions, cosine-similarity score matrices, row-wise log
//! softmax picks, logistic losses, a straight-through pass, and fixed sparse
//! propagation. That covers every loss in this crate; there is no general
//! broadcasting or dynamic graph surgery.
//!
//! Shape rules are internal programmer contracts and are enforced with
//! assertions; user-facing validation happens in the callers that build
//! graphs from external input.

use std::sync::Arc;

use ndarray::{Array1, Axis};

use super::{sigmoid, Mat, ParamId, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Fixed sparse matrix in per-row adjacency form, used for graph propagation.
/// `apply` computes `out[r] = sum_{(c, w) in rows[r]} w * x[c]`.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseMatrix {
    pub fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.nrows(), self.ncols, "sparse apply: input rows");
        let mut out = Mat::zeros((self.nrows, x.ncols()));
        for (r, entries) in self.rows.iter().enumerate() {
            for &(c, w) in entries {
                let src = x.row(c as usize);
                let mut dst = out.row_mut(r);
                dst.scaled_add(w, &src);
            }
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut rows = vec![Vec::new(); self.ncols];
        for (r, entries) in self.rows.iter().enumerate() {
            for &(c, w) in entries {
                rows[c as usize].push((r as u32, w));
            }
        }
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            rows,
        }
    }
}

enum Op {
    /// Leaf: external constant or parameter value.
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a + bias` with `bias` a 1xN row broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    /// Cosine similarity scores: x: BxD, y: TxD -> BxT.
    CosineRows(NodeId, NodeId),
    /// Per-row inner product: x, y: BxD -> Bx1.
    RowDot(NodeId, NodeId),
    /// `out[b] = log softmax(scores[b, :])[picks[b]]`, scores: BxT -> Bx1.
    PickLogSoftmax(NodeId, Vec<usize>),
    /// Stable `-[y log sigmoid(s) + (1-y) log(1 - sigmoid(s))]`, s: Bx1 -> Bx1.
    BceWithLogits(NodeId, Vec<f64>),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Forward takes a fixed value; backward copies the gradient to `src`.
    StraightThrough(NodeId),
    /// Fixed sparse multiply; stores the transpose needed for backward.
    SpMul(Arc<SparseMatrix>, NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`, if it
    /// participated in the computation.
    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        let value = va.dot(vb);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(bias);
        assert_eq!(vb.nrows(), 1, "add_row bias must be 1xN");
        assert_eq!(va.ncols(), vb.ncols(), "add_row widths");
        let value = va + vb;
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim(), "add shapes");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).raw_dim(), self.value(b).raw_dim(), "sub shapes");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut value = Mat::zeros((idx.len(), va.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&va.row(i));
        }
        self.push(value, Op::GatherRows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs parts");
        let nrows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Mat::zeros((nrows, total));
        let mut off = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), nrows, "concat_cols row counts");
            value
                .slice_mut(ndarray::s![.., off..off + v.ncols()])
                .assign(v);
            off += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts))
    }

    /// Cosine-similarity score matrix between the rows of `x` (BxD) and the
    /// rows of `y` (TxD). All rows of both inputs must have nonzero norm;
    /// callers validate that before building the node.
    pub fn cosine_rows(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let vx = self.value(x);
        let vy = self.value(y);
        assert_eq!(vx.ncols(), vy.ncols(), "cosine_rows widths");
        let nx = row_norms(vx);
        let ny = row_norms(vy);
        assert!(
            nx.iter().chain(ny.iter()).all(|&n| n > 0.0),
            "cosine_rows: zero-norm row"
        );
        let mut value = vx.dot(&vy.t());
        for b in 0..value.nrows() {
            for t in 0..value.ncols() {
                value[[b, t]] /= nx[b] * ny[t];
            }
        }
        self.push(value, Op::CosineRows(x, y))
    }

    pub fn row_dot(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let vx = self.value(x);
        let vy = self.value(y);
        assert_eq!(vx.raw_dim(), vy.raw_dim(), "row_dot shapes");
        let mut value = Mat::zeros((vx.nrows(), 1));
        for b in 0..vx.nrows() {
            value[[b, 0]] = vx.row(b).dot(&vy.row(b));
        }
        self.push(value, Op::RowDot(x, y))
    }

    pub fn pick_log_softmax(&mut self, scores: NodeId, picks: Vec<usize>) -> NodeId {
        let vs = self.value(scores);
        assert_eq!(vs.nrows(), picks.len(), "pick_log_softmax picks");
        let mut value = Mat::zeros((vs.nrows(), 1));
        for (b, &p) in picks.iter().enumerate() {
            let row = vs.row(b);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
            value[[b, 0]] = row[p] - lse;
        }
        self.push(value, Op::PickLogSoftmax(scores, picks))
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, labels: Vec<f64>) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.ncols(), 1, "bce_with_logits expects Bx1 logits");
        assert_eq!(vl.nrows(), labels.len(), "bce_with_logits labels");
        let mut value = Mat::zeros((vl.nrows(), 1));
        for (b, &y) in labels.iter().enumerate() {
            let s = vl[[b, 0]];
            value[[b, 0]] = s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        }
        self.push(value, Op::BceWithLogits(logits, labels))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Mat::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(value, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Straight-through node: forward evaluates to `value`, backward passes
    /// the incoming gradient to `src` unchanged.
    pub fn straight_through(&mut self, src: NodeId, value: Mat) -> NodeId {
        assert_eq!(self.value(src).raw_dim(), value.raw_dim(), "straight_through shapes");
        self.push(value, Op::StraightThrough(src))
    }

    pub fn sp_mul(&mut self, fwd: &SparseMatrix, bwd: Arc<SparseMatrix>, x: NodeId) -> NodeId {
        assert_eq!(fwd.nrows, bwd.ncols, "sp_mul transpose pair");
        assert_eq!(fwd.ncols, bwd.nrows, "sp_mul transpose pair");
        let value = fwd.apply(self.value(x));
        self.push(value, Op::SpMul(bwd, x))
    }

    fn add_to_grad(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    /// Backpropagates from the scalar `loss` node, filling node gradients.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    Self::add_to_grad(&mut grads, *a, ga);
                    Self::add_to_grad(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    Self::add_to_grad(&mut grads, *a, g.clone());
                    Self::add_to_grad(&mut grads, *bias, gb);
                }
                Op::Add(a, b) => {
                    Self::add_to_grad(&mut grads, *a, g.clone());
                    Self::add_to_grad(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    Self::add_to_grad(&mut grads, *a, g.clone());
                    Self::add_to_grad(&mut grads, *b, -&g);
                }
                Op::Scale(a, c) => {
                    Self::add_to_grad(&mut grads, *a, &g * *c);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    Self::add_to_grad(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let out = &self.nodes[i].value;
                    let ga = &g * &(out * &(1.0 - out));
                    Self::add_to_grad(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    Self::add_to_grad(&mut grads, *a, g.t().to_owned());
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    Self::add_to_grad(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let gp = g.slice(ndarray::s![.., off..off + w]).to_owned();
                        Self::add_to_grad(&mut grads, p, gp);
                        off += w;
                    }
                }
                Op::CosineRows(x, y) => {
                    let vx = &self.nodes[x.0].value;
                    let vy = &self.nodes[y.0].value;
                    let out = &self.nodes[i].value;
                    let nx = row_norms(vx);
                    let ny = row_norms(vy);
                    // d out_bt / d x_b = y_t/(nx_b ny_t) - out_bt x_b / nx_b^2
                    // d out_bt / d y_t = x_b/(nx_b ny_t) - out_bt y_t / ny_t^2
                    let mut gx = Mat::zeros(vx.raw_dim());
                    let mut gy = Mat::zeros(vy.raw_dim());
                    for b in 0..vx.nrows() {
                        for t in 0..vy.nrows() {
                            let gbt = g[[b, t]];
                            if gbt == 0.0 {
                                continue;
                            }
                            let inv = 1.0 / (nx[b] * ny[t]);
                            let o = out[[b, t]];
                            for d in 0..vx.ncols() {
                                gx[[b, d]] += gbt * (vy[[t, d]] * inv - o * vx[[b, d]] / (nx[b] * nx[b]));
                                gy[[t, d]] += gbt * (vx[[b, d]] * inv - o * vy[[t, d]] / (ny[t] * ny[t]));
                            }
                        }
                    }
                    Self::add_to_grad(&mut grads, *x, gx);
                    Self::add_to_grad(&mut grads, *y, gy);
                }
                Op::RowDot(x, y) => {
                    let vx = &self.nodes[x.0].value;
                    let vy = &self.nodes[y.0].value;
                    let mut gx = Mat::zeros(vx.raw_dim());
                    let mut gy = Mat::zeros(vy.raw_dim());
                    for b in 0..vx.nrows() {
                        let gb = g[[b, 0]];
                        gx.row_mut(b).scaled_add(gb, &vy.row(b));
                        gy.row_mut(b).scaled_add(gb, &vx.row(b));
                    }
                    Self::add_to_grad(&mut grads, *x, gx);
                    Self::add_to_grad(&mut grads, *y, gy);
                }
                Op::PickLogSoftmax(scores, picks) => {
                    let vs = &self.nodes[scores.0].value;
                    let mut gs = Mat::zeros(vs.raw_dim());
                    for (b, &p) in picks.iter().enumerate() {
                        let gb = g[[b, 0]];
                        if gb == 0.0 {
                            continue;
                        }
                        let row = vs.row(b);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&s| (s - m).exp()).sum();
                        for t in 0..row.len() {
                            let soft = (row[t] - m).exp() / denom;
                            let ind = if t == p { 1.0 } else { 0.0 };
                            gs[[b, t]] += gb * (ind - soft);
                        }
                    }
                    Self::add_to_grad(&mut grads, *scores, gs);
                }
                Op::BceWithLogits(logits, labels) => {
                    let vl = &self.nodes[logits.0].value;
                    let mut gl = Mat::zeros(vl.raw_dim());
                    for (b, &y) in labels.iter().enumerate() {
                        gl[[b, 0]] = g[[b, 0]] * (sigmoid(vl[[b, 0]]) - y);
                    }
                    Self::add_to_grad(&mut grads, *logits, gl);
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let n = self.nodes[a.0].value.len() as f64;
                    let ga = Mat::from_elem(shape, g[[0, 0]] / n);
                    Self::add_to_grad(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let ga = Mat::from_elem(shape, g[[0, 0]]);
                    Self::add_to_grad(&mut grads, *a, ga);
                }
                Op::StraightThrough(src) => {
                    Self::add_to_grad(&mut grads, *src, g.clone());
                }
                Op::SpMul(bwd, x) => {
                    let gx = bwd.apply(&g);
                    Self::add_to_grad(&mut grads, *x, gx);
                }
            }
        }
        self.grads = grads;
    }
}

fn row_norms(m: &Mat) -> Array1<f64> {
    let mut out = Array1::zeros(m.nrows());
    for (r, row) in m.rows().into_iter().enumerate() {
        out[r] = row.dot(&row).sqrt();
    }
    out
}

/// Maps parameters of one [`ParamSet`] onto tape leaves, deduplicating
/// repeated binds, and routes node gradients back into the set afterwards.
/// A step that trains two models in one graph uses one `Bound` per set.
#[derive(Default)]
pub struct Bound {
    pairs: Vec<(ParamId, NodeId)>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&(_, nid)) = self.pairs.iter().find(|(pid, _)| *pid == id) {
            return nid;
        }
        let nid = tape.constant(params.value(id).clone());
        self.pairs.push((id, nid));
        nid
    }

    /// Adds the tape gradients of all bound leaves into the set's
    /// accumulators. Leaves that did not participate contribute zero.
    pub fn accumulate(&self, tape: &Tape, params: &mut ParamSet) {
        for &(pid, nid) in &self.pairs {
            if let Some(g) = tape.grad(nid) {
                params.add_grad(pid, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_grad_is_w() {
        // loss = 0.5 * ||w||^2  =>  dloss/dw = w
        let mut tape = Tape::new();
        let w = tape.constant(array![[1.0, -2.0, 3.0]]);
        let dot = tape.row_dot(w, w);
        let loss = {
            let s = tape.sum_all(dot);
            tape.scale(s, 0.5)
        };
        tape.backward(loss);
        assert_eq!(tape.grad(w).unwrap(), &array![[1.0, -2.0, 3.0]]);
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut tape = Tape::new();
        let w = tape.constant(array![[1.0, 2.0]]);
        let unused = tape.constant(array![[5.0]]);
        let loss = tape.sum_all(w);
        tape.backward(loss);
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad(w).unwrap(), &array![[1.0, 1.0]]);
    }

    #[test]
    fn matmul_grads() {
        // loss = sum(A B); dA = 1 B^T, dB = A^T 1
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[5.0], [6.0]]);
        let p = tape.matmul(a, b);
        let loss = tape.sum_all(p);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(tape.grad(b).unwrap(), &array![[4.0], [6.0]]);
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut tape = Tape::new();
        let z = tape.constant(array![[1.0, 2.0]]);
        let q = tape.straight_through(z, array![[10.0, 20.0]]);
        let dot = tape.row_dot(q, q);
        let loss = tape.sum_all(dot);
        tape.backward(loss);
        // d loss / d q = 2q = [20, 40]; straight-through hands it to z.
        assert_eq!(tape.grad(z).unwrap(), &array![[20.0, 40.0]]);
        assert_eq!(tape.value(q), &array![[10.0, 20.0]]);
    }

    #[test]
    fn gather_scatter_adds() {
        let mut tape = Tape::new();
        let t = tape.constant(array![[1.0], [2.0], [3.0]]);
        let g = tape.gather_rows(t, vec![0, 0, 2]);
        let loss = tape.sum_all(g);
        tape.backward(loss);
        assert_eq!(tape.grad(t).unwrap(), &array![[2.0], [0.0], [1.0]]);
    }

    #[test]
    fn bce_with_logits_value_and_grad() {
        let mut tape = Tape::new();
        let s = tape.constant(array![[0.0], [30.0]]);
        let l = tape.bce_with_logits(s, vec![1.0, 1.0]);
        let loss = tape.sum_all(l);
        // logit 0, y=1 -> ln 2; saturated logit -> ~0
        assert!((tape.value(l)[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(tape.value(l)[[1, 0]] < 1e-12);
        tape.backward(loss);
        let g = tape.grad(s).unwrap();
        assert!((g[[0, 0]] - (-0.5)).abs() < 1e-12); // sigmoid(0) - 1
    }

    #[test]
    fn sparse_apply_and_transpose() {
        let m = SparseMatrix {
            nrows: 2,
            ncols: 3,
            rows: vec![vec![(0, 1.0), (2, 0.5)], vec![(1, 2.0)]],
        };
        let x = array![[1.0], [10.0], [100.0]];
        assert_eq!(m.apply(&x), array![[51.0], [20.0]]);
        let t = m.transpose();
        assert_eq!(t.nrows, 3);
        assert_eq!(t.apply(&array![[1.0], [1.0]]), array![[1.0], [2.0], [0.5]]);
    }
}

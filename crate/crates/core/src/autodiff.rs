//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Every trainable path in the model (encoders, gate, box head, loss heads)
//! is expressed as a graph of the ops below, so analytic gradients come from
//! one backward pass. Ops carry their own backward rule; the graph is an
//! append-only arena, so node ids are already in topological order.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix. Vectors are (1, n); scalars are (1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data/shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        self.data[0]
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    /// C = A * B
    MatMul(NodeId, NodeId),
    /// C = A * B^T  (A is m×k, B is n×k)
    MatMulNt(NodeId, NodeId),
    /// C = A + broadcast of bias row b (1×n)
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    /// C = A / t where t is a (1,1) node
    DivScalar(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Abs(NodeId),
    L2NormalizeRows(NodeId),
    ConcatCols(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    /// (1, m) vector of diagonal entries of a square matrix
    Diag(NodeId),
    /// (1, m) vector: logsumexp of each row
    LogSumExpRows(NodeId),
    /// (1, n) vector: logsumexp of each column
    LogSumExpCols(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// (1, n) vector of 1 - IoU(pred_row, gt_row); boxes in (cx, cy, w, h)
    OneMinusIouRows(NodeId, Tensor),
    /// softmax cross-entropy mean over rows of logits against class labels
    CrossEntropyMean(NodeId, Vec<usize>),
    /// mean binary cross-entropy with logits against constant 0/1 labels
    BceWithLogitsMean(NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation graph arena. Build with the op methods, then call `backward`
/// on a scalar node to populate gradients for every node.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian-CDF GELU: x * Phi(x).
fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// IoU of two boxes in center-size form. Zero union is defined as IoU 0.
pub fn iou_value(pred: &[f64], gt: &[f64]) -> f64 {
    let (inter, union) = iou_parts(pred, gt);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn corners(b: &[f64]) -> (f64, f64, f64, f64) {
    (
        b[0] - b[2] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[1] + b[3] / 2.0,
    )
}

fn iou_parts(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let (px1, px2, py1, py2) = corners(pred);
    let (gx1, gx2, gy1, gy2) = corners(gt);
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = pred[2] * pred[3] + gt[2] * gt[3] - inter;
    (inter, union)
}

/// d IoU / d pred for one box pair. At touching-edge ties the one-sided
/// derivative toward increasing overlap is taken (>= / <= comparisons).
fn iou_grad(pred: &[f64], gt: &[f64]) -> [f64; 4] {
    let (px1, px2, py1, py2) = corners(pred);
    let (gx1, gx2, gy1, gy2) = corners(gt);
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (inter, union) = iou_parts(pred, gt);
    if union <= 0.0 || iw <= 0.0 || ih <= 0.0 {
        return [0.0; 4];
    }
    // d iw / d corners of pred
    let diw_dx2 = if px2 <= gx2 { 1.0 } else { 0.0 };
    let diw_dx1 = if px1 >= gx1 { -1.0 } else { 0.0 };
    let dih_dy2 = if py2 <= gy2 { 1.0 } else { 0.0 };
    let dih_dy1 = if py1 >= gy1 { -1.0 } else { 0.0 };
    // inter = iw * ih
    let di = [
        ih * diw_dx1, // d inter / d px1
        ih * diw_dx2,
        iw * dih_dy1,
        iw * dih_dy2,
    ];
    // chain corners -> (cx, cy, w, h): x1 = cx - w/2, x2 = cx + w/2
    let dinter = [
        di[0] + di[1],
        di[2] + di[3],
        (-di[0] + di[1]) / 2.0,
        (-di[2] + di[3]) / 2.0,
    ];
    // area_p = w * h
    let darea = [0.0, 0.0, pred[3], pred[2]];
    let mut out = [0.0; 4];
    for k in 0..4 {
        let dunion = darea[k] - dinter[k];
        out[k] = (dinter[k] * union - inter * dunion) / (union * union);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id].value;
        (t.rows, t.cols)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let av = self.nodes[a].value.get(i, p);
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += av * self.nodes[b].value.get(p, j);
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    /// X * W^T for weight matrices stored as (out, in).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += self.nodes[a].value.get(i, p) * self.nodes[b].value.get(j, p);
                }
                out.data[i * n + j] = s;
            }
        }
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let (br, bn) = self.shape(bias);
        assert_eq!((br, bn), (1, n), "bias shape");
        let mut out = self.nodes[a].value.clone();
        for i in 0..m {
            for j in 0..n {
                out.data[i * n + j] += self.nodes[bias].value.data[j];
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out = Tensor {
            rows: self.nodes[a].value.rows,
            cols: self.nodes[a].value.cols,
            data: self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = Tensor {
            rows: self.nodes[a].value.rows,
            cols: self.nodes[a].value.cols,
            data: self.nodes[a].value.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(out, op)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, |x| x * c, Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, |x| x + c, Op::AddConst(a))
    }

    pub fn div_scalar(&mut self, a: NodeId, t: NodeId) -> NodeId {
        assert_eq!(self.shape(t), (1, 1), "divisor must be scalar node");
        let tv = self.nodes[t].value.item();
        self.map(a, |x| x / tv, Op::DivScalar(a, t))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = self.nodes[a].value.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm > 0.0, "cannot normalize zero row");
            for j in 0..n {
                out.data[i * n + j] = row[j] / norm;
            }
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n1) = self.shape(a);
        let (m2, n2) = self.shape(b);
        assert_eq!(m, m2, "concat row mismatch");
        let mut out = Tensor::zeros(m, n1 + n2);
        for i in 0..m {
            out.data[i * (n1 + n2)..i * (n1 + n2) + n1]
                .copy_from_slice(self.nodes[a].value.row(i));
            out.data[i * (n1 + n2) + n1..(i + 1) * (n1 + n2)]
                .copy_from_slice(self.nodes[b].value.row(i));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = Tensor::zeros(indices.len(), n);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < m, "gather index out of range");
            out.data[i * n..(i + 1) * n].copy_from_slice(self.nodes[a].value.row(idx));
        }
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn diag(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m, n, "diag of non-square");
        let data = (0..m).map(|i| self.nodes[a].value.get(i, i)).collect();
        self.push(Tensor::new(1, m, data), Op::Diag(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        let data = (0..m)
            .map(|i| logsumexp(self.nodes[a].value.row(i).iter().copied()))
            .collect();
        self.push(Tensor::new(1, m, data), Op::LogSumExpRows(a))
    }

    pub fn logsumexp_cols(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let data = (0..n)
            .map(|j| logsumexp((0..m).map(|i| self.nodes[a].value.get(i, j))))
            .collect();
        self.push(Tensor::new(1, n, data), Op::LogSumExpCols(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let v = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.data.iter().sum::<f64>();
        self.push(Tensor::scalar(v), Op::SumAll(a))
    }

    pub fn one_minus_iou_rows(&mut self, pred: NodeId, gt: Tensor) -> NodeId {
        let (m, n) = self.shape(pred);
        assert_eq!(n, 4, "boxes are 4-dim");
        assert_eq!((gt.rows, gt.cols), (m, 4), "gt box shape");
        let data = (0..m)
            .map(|i| 1.0 - iou_value(self.nodes[pred].value.row(i), gt.row(i)))
            .collect();
        self.push(Tensor::new(1, m, data), Op::OneMinusIouRows(pred, gt))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let (m, n) = self.shape(logits);
        assert_eq!(m, labels.len(), "label count");
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < n, "label out of range");
            let row = self.nodes[logits].value.row(i);
            total += logsumexp(row.iter().copied()) - row[y];
        }
        self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropyMean(logits, labels.to_vec()),
        )
    }

    pub fn bce_with_logits_mean(&mut self, logits: NodeId, labels: Tensor) -> NodeId {
        let (m, n) = self.shape(logits);
        assert_eq!((labels.rows, labels.cols), (m, n), "bce label shape");
        let k = (m * n) as f64;
        let mut total = 0.0;
        for (&x, &y) in self.nodes[logits].value.data.iter().zip(&labels.data) {
            // stable: max(x,0) - x*y + ln(1 + e^{-|x|})
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        self.push(
            Tensor::scalar(total / k),
            Op::BceWithLogitsMean(logits, labels),
        )
    }

    /// Backpropagate from a scalar node; returns per-node gradients
    /// (None for nodes the loss does not depend on).
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                for (gi, di) in g.data.iter_mut().zip(&delta.data) {
                    *gi += di;
                }
            }
            None => {
                let (m, n) = self.shape(id);
                assert_eq!((delta.rows, delta.cols), (m, n), "grad shape");
                grads[id] = Some(delta);
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.shape(id);
                let k = self.shape(*a).1;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut da = Tensor::zeros(m, k);
                let mut db = Tensor::zeros(k, n);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da.data[i * k + p] += gij * bv.get(p, j);
                            db.data[p * n + j] += gij * av.get(i, p);
                        }
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                // C = A B^T: dA = G B ; dB = G^T A
                let (m, n) = self.shape(id);
                let k = self.shape(*a).1;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut da = Tensor::zeros(m, k);
                let mut db = Tensor::zeros(n, k);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da.data[i * k + p] += gij * bv.get(j, p);
                            db.data[j * k + p] += gij * av.get(i, p);
                        }
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::AddBias(a, bias) => {
                let (m, n) = self.shape(id);
                let mut db = Tensor::zeros(1, n);
                for i in 0..m {
                    for j in 0..n {
                        db.data[j] += g.get(i, j);
                    }
                }
                self.acc(grads, *a, g.clone());
                self.acc(grads, *bias, db);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().map(|x| -x).collect(),
                };
                self.acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let bv = &self.nodes[*b].value;
                let av = &self.nodes[*a].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                };
                let db = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                };
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::ScaleConst(a, c) => {
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().map(|x| x * c).collect(),
                };
                self.acc(grads, *a, da);
            }
            Op::AddConst(a) => {
                self.acc(grads, *a, g.clone());
            }
            Op::DivScalar(a, t) => {
                let tv = self.nodes[*t].value.item();
                let av = &self.nodes[*a].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().map(|x| x / tv).collect(),
                };
                let dt: f64 = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(gi, ai)| -gi * ai / (tv * tv))
                    .sum();
                self.acc(grads, *a, da);
                self.acc(grads, *t, Tensor::scalar(dt));
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                };
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(gi, &s)| gi * s * (1.0 - s))
                        .collect(),
                };
                self.acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[id].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(gi, &y)| gi * (1.0 - y * y))
                        .collect(),
                };
                self.acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[*a].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(gi, &x)| gi * (phi_cdf(x) + x * phi_pdf(x)))
                        .collect(),
                };
                self.acc(grads, *a, da);
            }
            Op::Abs(a) => {
                let av = &self.nodes[*a].value;
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(gi, &x)| gi * x.signum() * if x == 0.0 { 0.0 } else { 1.0 })
                        .collect(),
                };
                self.acc(grads, *a, da);
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = self.shape(id);
                let av = &self.nodes[*a].value;
                let yv = &self.nodes[id].value;
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    let norm = av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = yv
                        .row(i)
                        .iter()
                        .zip(g.row(i))
                        .map(|(y, gy)| y * gy)
                        .sum();
                    for j in 0..n {
                        da.data[i * n + j] = (g.get(i, j) - yv.get(i, j) * dot) / norm;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let (m, n1) = self.shape(*a);
                let (_, n2) = self.shape(*b);
                let mut da = Tensor::zeros(m, n1);
                let mut db = Tensor::zeros(m, n2);
                for i in 0..m {
                    da.data[i * n1..(i + 1) * n1].copy_from_slice(&g.row(i)[..n1]);
                    db.data[i * n2..(i + 1) * n2].copy_from_slice(&g.row(i)[n1..]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::GatherRows(a, indices) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(m, n);
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..n {
                        da.data[idx * n + j] += g.get(i, j);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Diag(a) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    da.data[i * n + i] = g.data[i];
                }
                self.acc(grads, *a, da);
            }
            Op::LogSumExpRows(a) => {
                let (m, n) = self.shape(*a);
                let av = &self.nodes[*a].value;
                let yv = &self.nodes[id].value;
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..n {
                        da.data[i * n + j] = g.data[i] * (av.get(i, j) - yv.data[i]).exp();
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::LogSumExpCols(a) => {
                let (m, n) = self.shape(*a);
                let av = &self.nodes[*a].value;
                let yv = &self.nodes[id].value;
                let mut da = Tensor::zeros(m, n);
                for j in 0..n {
                    for i in 0..m {
                        da.data[i * n + j] = g.data[j] * (av.get(i, j) - yv.data[j]).exp();
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let (m, n) = self.shape(*a);
                let scale = g.item() / (m * n) as f64;
                self.acc(
                    grads,
                    *a,
                    Tensor {
                        rows: m,
                        cols: n,
                        data: vec![scale; m * n],
                    },
                );
            }
            Op::SumAll(a) => {
                let (m, n) = self.shape(*a);
                self.acc(
                    grads,
                    *a,
                    Tensor {
                        rows: m,
                        cols: n,
                        data: vec![g.item(); m * n],
                    },
                );
            }
            Op::OneMinusIouRows(pred, gt) => {
                let (m, _) = self.shape(*pred);
                let pv = &self.nodes[*pred].value;
                let mut da = Tensor::zeros(m, 4);
                for i in 0..m {
                    let gi = g.data[i];
                    let grad = iou_grad(pv.row(i), gt.row(i));
                    for k in 0..4 {
                        da.data[i * 4 + k] = -gi * grad[k];
                    }
                }
                self.acc(grads, *pred, da);
            }
            Op::CrossEntropyMean(logits, labels) => {
                let (m, n) = self.shape(*logits);
                let lv = &self.nodes[*logits].value;
                let scale = g.item() / m as f64;
                let mut da = Tensor::zeros(m, n);
                for (i, &y) in labels.iter().enumerate() {
                    let lse = logsumexp(lv.row(i).iter().copied());
                    for j in 0..n {
                        let p = (lv.get(i, j) - lse).exp();
                        da.data[i * n + j] =
                            scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.acc(grads, *logits, da);
            }
            Op::BceWithLogitsMean(logits, labels) => {
                let (m, n) = self.shape(*logits);
                let lv = &self.nodes[*logits].value;
                let scale = g.item() / (m * n) as f64;
                let da = Tensor {
                    rows: m,
                    cols: n,
                    data: lv
                        .data
                        .iter()
                        .zip(&labels.data)
                        .map(|(&x, &y)| scale * (sigmoid(x) - y))
                        .collect(),
                };
                self.acc(grads, *logits, da);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar-valued graph builder against
    /// the analytic gradient of one leaf tensor.
    /// The builder must insert the checked tensor as its first leaf (node 0).
    pub fn check_grad(
        build: impl Fn(&mut Graph, &Tensor) -> NodeId,
        x0: &Tensor,
        step: f64,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let loss = build(&mut g, x0);
        let grads = g.backward(loss);
        // find the first leaf (builder inserts x0 as node 0 by convention)
        let analytic = grads[0].clone().expect("no grad on leaf");
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data[i] += step;
            let mut gp = Graph::new();
            let lp = build(&mut gp, &xp);
            let fp = gp.value(lp).item();

            let mut xm = x0.clone();
            xm.data[i] -= step;
            let mut gm = Graph::new();
            let lm = build(&mut gm, &xm);
            let fm = gm.value(lm).item();

            let fd = (fp - fm) / (2.0 * step);
            let an = analytic.data[i];
            // central differences carry ~|f|*eps/step of rounding noise;
            // treat sub-noise absolute differences as agreement
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - an).abs() <= 1e-8 || (fd - an).abs() / denom <= tol,
                "grad mismatch at {i}: fd={fd} analytic={an}"
            );
        }
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        // tiny xorshift; avoids pulling rand into unit tests here
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| next()).collect(),
        }
    }

    #[test]
    fn matmul_against_hand_example() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b);
        assert_eq!(
            g.value(c).data,
            vec![19.0, 22.0, 43.0, 50.0]
        );
    }

    #[test]
    fn grad_through_mlp_chain() {
        let x0 = rand_tensor(3, 4, 7);
        check_grad(
            |g, x| {
                let xid = g.leaf(x.clone());
                let w = g.leaf(rand_tensor(5, 4, 11));
                let b = g.leaf(rand_tensor(1, 5, 13));
                let h = g.matmul_nt(xid, w);
                let h = g.add_bias(h, b);
                let h = g.gelu(h);
                let n = g.l2_normalize_rows(h);
                g.mean_all(n)
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_logsumexp_and_diag() {
        let x0 = rand_tensor(4, 4, 3);
        check_grad(
            |g, x| {
                let xid = g.leaf(x.clone());
                let d = g.diag(xid);
                let lr = g.logsumexp_rows(xid);
                let lc = g.logsumexp_cols(xid);
                let a = g.sub(d, lr);
                let b = g.sub(d, lc);
                let s = g.add(a, b);
                let m = g.mean_all(s);
                g.scale(m, -0.5)
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_iou_term() {
        // generic overlapping configuration
        let pred = Tensor::new(2, 4, vec![0.5, 0.52, 0.4, 0.38, 0.32, 0.31, 0.2, 0.25]);
        let gt = Tensor::new(2, 4, vec![0.6, 0.5, 0.35, 0.4, 0.35, 0.3, 0.3, 0.2]);
        check_grad(
            move |g, x| {
                let xid = g.leaf(x.clone());
                let l = g.one_minus_iou_rows(xid, gt.clone());
                g.mean_all(l)
            },
            &pred,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_ce_and_bce() {
        let x0 = rand_tensor(3, 5, 21);
        check_grad(
            |g, x| {
                let xid = g.leaf(x.clone());
                g.cross_entropy_mean(xid, &[0, 3, 2])
            },
            &x0,
            1e-6,
            1e-5,
        );
        let logits = rand_tensor(1, 6, 22);
        let labels = Tensor::new(1, 6, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        check_grad(
            move |g, x| {
                let xid = g.leaf(x.clone());
                g.bce_with_logits_mean(xid, labels.clone())
            },
            &logits,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn grad_div_by_temperature() {
        let x0 = Tensor::scalar(0.07);
        check_grad(
            |g, x| {
                let t = g.leaf(x.clone());
                let s = g.leaf(rand_tensor(3, 3, 31));
                let scaled = g.div_scalar(s, t);
                g.mean_all(scaled)
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn iou_worked_example() {
        // 0.12 intersection over 0.20 union
        let l = [0.5, 0.5, 0.4, 0.4];
        let lh = [0.6, 0.5, 0.4, 0.4];
        assert!((iou_value(&l, &lh) - 0.6).abs() < 1e-12);
        assert!((iou_value(&lh, &l) - 0.6).abs() < 1e-12);
        assert_eq!(iou_value(&[0.1, 0.1, 0.1, 0.1], &[0.9, 0.9, 0.1, 0.1]), 0.0);
        assert_eq!(iou_value(&[0.5, 0.5, 0.0, 0.0], &[0.5, 0.5, 0.0, 0.0]), 0.0);
        assert!((iou_value(&l, &l) - 1.0).abs() < 1e-12);
    }
}

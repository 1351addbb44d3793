//! Training objectives: contrastive (ITC), matching with hard negatives
//! (ITM), localized alignment (box head + IoU/L1), classification CE, and
//! their unweighted sum. Each builder attaches to an autodiff graph so the
//! exact gradients come out of a single backward pass.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{CvError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Binary matching head: one logit from a joint CLS vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl MatchParams {
    pub fn init(joint_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (joint_dim as f64).sqrt();
        MatchParams {
            w: Tensor {
                rows: 1,
                cols: joint_dim,
                data: (0..joint_dim)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a)
                    .collect(),
            },
            b: Tensor::zeros(1, 1),
        }
    }
}

/// Two-layer box regression head: d -> 2d -> 4, sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LocParams {
    pub fn init(joint_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 2 * joint_dim;
        let a1 = 1.0 / (joint_dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        LocParams {
            w1: Tensor {
                rows: hidden,
                cols: joint_dim,
                data: (0..hidden * joint_dim)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a1)
                    .collect(),
            },
            b1: Tensor::zeros(1, hidden),
            w2: Tensor {
                rows: 4,
                cols: hidden,
                data: (0..4 * hidden)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a2)
                    .collect(),
            },
            b2: Tensor::zeros(1, 4),
        }
    }

    pub fn zeros(joint_dim: usize) -> Self {
        LocParams {
            w1: Tensor::zeros(2 * joint_dim, joint_dim),
            b1: Tensor::zeros(1, 2 * joint_dim),
            w2: Tensor::zeros(4, 2 * joint_dim),
            b2: Tensor::zeros(1, 4),
        }
    }
}

/// Single-layer location classifier over the fused embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClfParams {
    pub fn init(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (in_dim as f64).sqrt();
        ClfParams {
            w: Tensor {
                rows: num_classes,
                cols: in_dim,
                data: (0..num_classes * in_dim)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a)
                    .collect(),
            },
            b: Tensor::zeros(1, num_classes),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LocIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn insert_loc(g: &mut Graph, p: &LocParams) -> LocIds {
    LocIds {
        w1: g.leaf(p.w1.clone()),
        b1: g.leaf(p.b1.clone()),
        w2: g.leaf(p.w2.clone()),
        b2: g.leaf(p.b2.clone()),
    }
}

/// S = f_I f_T^T / tau inside the graph; tau is a 1×1 leaf.
pub fn similarity_matrix(g: &mut Graph, f_i: NodeId, f_t: NodeId, tau: NodeId) -> NodeId {
    let s = g.matmul_nt(f_i, f_t);
    g.div_scalar(s, tau)
}

/// Forward-only similarity matrix with validation.
pub fn similarity_values(f_i: &Tensor, f_t: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(CvError::invalid("temperature must be strictly positive"));
    }
    if f_i.rows != f_t.rows || f_i.cols != f_t.cols {
        return Err(CvError::invalid("embedding batch shape mismatch"));
    }
    let mut g = Graph::new();
    let i = g.leaf(f_i.clone());
    let t = g.leaf(f_t.clone());
    let tau = g.leaf(Tensor::scalar(tau));
    let s = similarity_matrix(&mut g, i, t, tau);
    Ok(g.value(s).clone())
}

/// Symmetric InfoNCE over the matched diagonal:
/// L = -(1/2B) sum_i [log softmax_row(S)[i][i] + log softmax_col(S)[i][i]].
pub fn itc_loss(g: &mut Graph, sim: NodeId) -> Result<NodeId> {
    let (rows, cols) = {
        let v = g.value(sim);
        (v.rows, v.cols)
    };
    if rows != cols {
        return Err(CvError::invalid("similarity matrix must be square"));
    }
    if rows < 2 {
        return Err(CvError::invalid(
            "ITC needs a batch of at least 2 matched pairs",
        ));
    }
    let d = g.diag(sim);
    let lse_r = g.logsumexp_rows(sim);
    let lse_c = g.logsumexp_cols(sim);
    let row_term = g.sub(d, lse_r);
    let col_term = g.sub(d, lse_c);
    let both = g.add(row_term, col_term);
    let total = g.sum_all(both);
    Ok(g.scale(total, -0.5 / rows as f64))
}

/// Per-row and per-column off-diagonal argmax, ties to the smallest index.
pub fn mine_hard_negatives(s: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    if s.rows != s.cols {
        return Err(CvError::invalid("similarity matrix must be square"));
    }
    let b = s.rows;
    if b < 2 {
        return Err(CvError::invalid("hard-negative mining needs B >= 2"));
    }
    let mut text_neg = Vec::with_capacity(b);
    let mut image_neg = Vec::with_capacity(b);
    for i in 0..b {
        let mut best = if i == 0 { 1 } else { 0 };
        for j in 0..b {
            if j != i && s.get(i, j) > s.get(i, best) {
                best = j;
            }
        }
        text_neg.push(best);
    }
    for j in 0..b {
        let mut best = if j == 0 { 1 } else { 0 };
        for i in 0..b {
            if i != j && s.get(i, j) > s.get(best, j) {
                best = i;
            }
        }
        image_neg.push(best);
    }
    Ok((text_neg, image_neg))
}

/// Matching logits for a stack of joint CLS vectors (N × d -> N × 1).
pub fn match_logits(g: &mut Graph, w: NodeId, b: NodeId, cls: NodeId) -> NodeId {
    let l = g.matmul_nt(cls, w);
    g.add_bias(l, b)
}

/// Binary cross-entropy over 3B (positive, hard-negative) pairs.
pub fn itm_loss(g: &mut Graph, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
    let (n, c) = {
        let v = g.value(logits);
        (v.rows, v.cols)
    };
    if c != 1 {
        return Err(CvError::invalid("matching head must emit one logit per pair"));
    }
    if n != labels.len() {
        return Err(CvError::invalid("label count must match pair count"));
    }
    if n % 3 != 0 || n == 0 {
        return Err(CvError::invalid(format!(
            "ITM expects 3B pairs, got {n}"
        )));
    }
    let b = n / 3;
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives != b || labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(CvError::invalid(
            "ITM labels must be B ones followed by 2B zeros",
        ));
    }
    let lt = Tensor {
        rows: n,
        cols: 1,
        data: labels.to_vec(),
    };
    Ok(g.bce_with_logits_mean(logits, lt))
}

/// Box head: l_hat = sigmoid(W2 GELU(W1 x + b1) + b2), rows in (0,1)^4.
pub fn box_head(g: &mut Graph, ids: &LocIds, cls: NodeId) -> NodeId {
    let h = g.matmul_nt(cls, ids.w1);
    let h = g.add_bias(h, ids.b1);
    let h = g.gelu(h);
    let o = g.matmul_nt(h, ids.w2);
    let o = g.add_bias(o, ids.b2);
    g.sigmoid(o)
}

/// Forward-only box prediction for a single CLS vector.
pub fn box_head_values(params: &LocParams, x_cls: &[f64]) -> Result<[f64; 4]> {
    if x_cls.len() != params.w1.cols {
        return Err(CvError::invalid("CLS width does not match box head"));
    }
    if x_cls.iter().any(|v| !v.is_finite()) {
        return Err(CvError::invalid("CLS vector must be finite"));
    }
    let mut g = Graph::new();
    let x = g.leaf(Tensor {
        rows: 1,
        cols: x_cls.len(),
        data: x_cls.to_vec(),
    });
    let ids = insert_loc(&mut g, params);
    let out = box_head(&mut g, &ids, x);
    let v = g.value(out);
    Ok([v.data[0], v.data[1], v.data[2], v.data[3]])
}

/// Mean over concept pairs of (1 - IoU) + L1 between predicted and
/// ground-truth boxes (both center-size, normalized coordinates).
pub fn la_loss(g: &mut Graph, pred_boxes: NodeId, gt: &Tensor) -> Result<NodeId> {
    let (n, c) = {
        let v = g.value(pred_boxes);
        (v.rows, v.cols)
    };
    if c != 4 || gt.cols != 4 || gt.rows != n || n == 0 {
        return Err(CvError::invalid("LA needs matching N×4 box stacks, N >= 1"));
    }
    for i in 0..n {
        let r = gt.row(i);
        if !(r[2] >= 0.0 && r[3] >= 0.0 && r.iter().all(|v| v.is_finite())) {
            return Err(CvError::invalid(format!("invalid ground-truth box at row {i}")));
        }
    }
    let overlap = g.one_minus_iou_rows(pred_boxes, gt.clone());
    let overlap_mean = g.mean_all(overlap);
    let gt_node = g.leaf(gt.clone());
    let diff = g.sub(pred_boxes, gt_node);
    let l1 = g.abs(diff);
    let l1_sum = g.sum_all(l1);
    let l1_mean = g.scale(l1_sum, 1.0 / n as f64);
    Ok(g.add(overlap_mean, l1_mean))
}

/// Softmax cross-entropy over location classes.
pub fn ce_loss(
    g: &mut Graph,
    w: NodeId,
    b: NodeId,
    fused: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let (n, _) = {
        let v = g.value(fused);
        (v.rows, v.cols)
    };
    let classes = g.value(w).rows;
    if labels.len() != n {
        return Err(CvError::invalid("label count must match batch size"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(CvError::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let logits = g.matmul_nt(fused, w);
    let logits = g.add_bias(logits, b);
    Ok(g.cross_entropy_mean(logits, labels))
}

/// Named per-component values; None means the component is absent for the
/// current configuration (e.g. the no-text mode keeps only CE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub la: Option<f64>,
    pub ce: Option<f64>,
    pub total: f64,
}

/// Unweighted sum of whichever components are present, with a finiteness
/// guard that names the offending component.
pub fn total_loss(
    itc: Option<f64>,
    itm: Option<f64>,
    la: Option<f64>,
    ce: Option<f64>,
) -> Result<LossBreakdown> {
    let mut total = 0.0;
    for (name, v) in [("ITC", itc), ("ITM", itm), ("LA", la), ("CE", ce)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(CvError::NonFiniteLoss(name.to_string()));
            }
            total += v;
        }
    }
    Ok(LossBreakdown {
        itc,
        itm,
        la,
        ce,
        total,
    })
}

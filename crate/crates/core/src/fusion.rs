//! Text-conditioned channel gating for fusing image and text embeddings.
//!
//! The gate squeezes the text embedding through a bottleneck of width D/r,
//! expands back to D, and produces per-channel sigmoid weights:
//!
//!   z = ReLU(f_T W1^T + b1),  g = sigma(z W2^T + b2)
//!   f_fuse = g * f_I + (1 - g) * f_T
//!
//! Three variants are supported: plain concatenation (no gate), a static
//! 50/50 blend, and the dynamic learned gate above. W2 starts at zero so a
//! freshly initialized dynamic gate behaves exactly like the static one.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{CvError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "static")]
    StaticGate,
    #[serde(rename = "dynamic")]
    DynamicGate,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "static" => Ok(FusionMode::StaticGate),
            "dynamic" => Ok(FusionMode::DynamicGate),
            other => Err(CvError::Config(format!(
                "unknown fusion mode '{other}' (expected concat|static|dynamic)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::StaticGate => "static",
            FusionMode::DynamicGate => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// (D/r) × D squeeze weight.
    pub w1: Tensor,
    pub b1: Tensor,
    /// D × (D/r) expand weight.
    pub w2: Tensor,
    pub b2: Tensor,
    pub reduction: usize,
}

impl GateParams {
    pub fn init(embed_dim: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || embed_dim % reduction != 0 {
            return Err(CvError::Config(format!(
                "gate reduction {reduction} must divide embed_dim {embed_dim}"
            )));
        }
        let hidden = embed_dim / reduction;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (embed_dim as f64).sqrt();
        let w1 = Tensor {
            rows: hidden,
            cols: embed_dim,
            data: (0..hidden * embed_dim)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a)
                .collect(),
        };
        Ok(GateParams {
            w1,
            b1: Tensor::zeros(1, hidden),
            // Zero expansion weight: the gate starts as an exact 0.5 blend.
            w2: Tensor::zeros(embed_dim, hidden),
            b2: Tensor::zeros(1, embed_dim),
            reduction,
        })
    }

    pub fn zeros(embed_dim: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || embed_dim % reduction != 0 {
            return Err(CvError::Config(format!(
                "gate reduction {reduction} must divide embed_dim {embed_dim}"
            )));
        }
        let hidden = embed_dim / reduction;
        Ok(GateParams {
            w1: Tensor::zeros(hidden, embed_dim),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(embed_dim, hidden),
            b2: Tensor::zeros(1, embed_dim),
            reduction,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.cols
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn insert_gate(g: &mut Graph, p: &GateParams) -> GateIds {
    GateIds {
        w1: g.leaf(p.w1.clone()),
        b1: g.leaf(p.b1.clone()),
        w2: g.leaf(p.w2.clone()),
        b2: g.leaf(p.b2.clone()),
    }
}

/// Gate values g in (0,1), B × D, differentiable through the graph.
pub fn gate_forward(g: &mut Graph, ids: &GateIds, f_t: NodeId) -> NodeId {
    let z = g.matmul_nt(f_t, ids.w1);
    let z = g.add_bias(z, ids.b1);
    let z = g.relu(z);
    let s = g.matmul_nt(z, ids.w2);
    let s = g.add_bias(s, ids.b2);
    g.sigmoid(s)
}

/// f_fuse = g * f_I + (1 - g) * f_T inside the graph.
pub fn gated_fuse(g: &mut Graph, gate: NodeId, f_i: NodeId, f_t: NodeId) -> NodeId {
    let gi = g.mul(gate, f_i);
    let one_minus = {
        let neg = g.scale(gate, -1.0);
        g.add_const(neg, 1.0)
    };
    let gt = g.mul(one_minus, f_t);
    g.add(gi, gt)
}

/// Variant dispatch used by the training forward pass. Concat returns a
/// B × 2D tensor; the gate variants return B × D.
pub fn fuse_variant(
    g: &mut Graph,
    mode: FusionMode,
    ids: Option<&GateIds>,
    f_i: NodeId,
    f_t: NodeId,
) -> Result<NodeId> {
    match mode {
        FusionMode::Concat => Ok(g.concat_cols(f_i, f_t)),
        FusionMode::StaticGate => {
            let sum = g.add(f_i, f_t);
            Ok(g.scale(sum, 0.5))
        }
        FusionMode::DynamicGate => {
            let ids = ids.ok_or_else(|| CvError::Config("dynamic fusion needs gate params".into()))?;
            let gate = gate_forward(g, ids, f_t);
            Ok(gated_fuse(g, gate, f_i, f_t))
        }
    }
}

/// Forward-only gate values for a B × D text embedding matrix.
pub fn gate_values(params: &GateParams, f_t: &Tensor) -> Result<Tensor> {
    if f_t.cols != params.embed_dim() {
        return Err(CvError::invalid(format!(
            "text embedding width {} does not match gate dim {}",
            f_t.cols,
            params.embed_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(f_t.clone());
    let ids = insert_gate(&mut g, params);
    let out = gate_forward(&mut g, &ids, x);
    Ok(g.value(out).clone())
}

/// Forward-only fusion for a B × D pair of embedding matrices.
pub fn fuse_values(
    mode: FusionMode,
    params: Option<&GateParams>,
    f_i: &Tensor,
    f_t: &Tensor,
) -> Result<Tensor> {
    if f_i.rows != f_t.rows || f_i.cols != f_t.cols {
        return Err(CvError::invalid("image/text embedding shape mismatch"));
    }
    let mut g = Graph::new();
    let i = g.leaf(f_i.clone());
    let t = g.leaf(f_t.clone());
    let ids = params.map(|p| insert_gate(&mut g, p));
    let out = fuse_variant(&mut g, mode, ids.as_ref(), i, t)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn zero_params_give_exact_half_gate() {
        let p = GateParams::zeros(4, 2).unwrap();
        let f_t = rows(&[&[0.3, -0.7, 1.2, 0.0], &[2.0, 2.0, -2.0, 0.5]]);
        let g = gate_values(&p, &f_t).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fresh_init_matches_static_blend() {
        let p = GateParams::init(8, 4, 11).unwrap();
        let f_i = rows(&[&[0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]]);
        let f_t = rows(&[&[0.9, -0.9, 0.5, 0.0, 0.3, 0.7, -0.5, 0.2]]);
        let dynamic = fuse_values(FusionMode::DynamicGate, Some(&p), &f_i, &f_t).unwrap();
        let stat = fuse_values(FusionMode::StaticGate, None, &f_i, &f_t).unwrap();
        for (a, b) in dynamic.data.iter().zip(stat.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_positive_expand_bias_saturates_to_image() {
        let mut p = GateParams::zeros(4, 2).unwrap();
        p.b2.data.iter_mut().for_each(|v| *v = 20.0);
        let f_i = rows(&[&[1.0, -1.0, 0.5, 0.25]]);
        let f_t = rows(&[&[-3.0, 3.0, -3.0, 3.0]]);
        let fused = fuse_values(FusionMode::DynamicGate, Some(&p), &f_i, &f_t).unwrap();
        for (got, want) in fused.data.iter().zip(f_i.data.iter()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gate_matches_hand_rolled_forward() {
        // Independent scalar-loop implementation of the same equations.
        let b = 2;
        let d = 4;
        let r = 2;
        let mut p = GateParams::init(d, r, 42).unwrap();
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(99);
        p.w2.data
            .iter_mut()
            .for_each(|v| *v = rng.random::<f64>() - 0.5);
        p.b1.data.iter_mut().for_each(|v| *v = 0.1);
        p.b2.data.iter_mut().for_each(|v| *v = -0.2);
        let f_t = rows(&[&[0.5, -1.0, 0.25, 2.0], &[-0.75, 0.1, 1.5, -0.3]]);
        let got = gate_values(&p, &f_t).unwrap();

        let h = d / r;
        for row in 0..b {
            let ft = f_t.row(row);
            let mut z = vec![0.0; h];
            for k in 0..h {
                let mut acc = p.b1.data[k];
                for j in 0..d {
                    acc += ft[j] * p.w1.data[k * d + j];
                }
                z[k] = acc.max(0.0);
            }
            for j in 0..d {
                let mut acc = p.b2.data[j];
                for k in 0..h {
                    acc += z[k] * p.w2.data[j * h + k];
                }
                let want = 1.0 / (1.0 + (-acc).exp());
                assert!((got.get(row, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_doubles_width() {
        let f_i = rows(&[&[1.0, 2.0]]);
        let f_t = rows(&[&[3.0, 4.0]]);
        let out = fuse_values(FusionMode::Concat, None, &f_i, &f_t).unwrap();
        assert_eq!(out.cols, 4);
        assert_eq!(out.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn invalid_reduction_rejected() {
        assert!(GateParams::init(6, 4, 0).is_err());
        assert!(GateParams::init(6, 0, 0).is_err());
    }
}

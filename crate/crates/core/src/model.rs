//! Full model assembly: every trainable tensor, the joint forward pass that
//! produces all four losses on one graph, and JSON checkpointing.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::dataset::mix_seed;
use crate::encoders::{
    insert_joint, insert_text, insert_visual, joint_cls, text_bag_batch, text_prenorm,
    visual_prenorm, EncoderConfig, MlpIds, TextIds, JointParams, TextParams, VisualParams,
};
use crate::error::{CvError, Result};
use crate::fusion::{fuse_variant, insert_gate, FusionMode, GateIds, GateParams};
use crate::objectives::{
    box_head, ce_loss, insert_loc, itc_loss, itm_loss, la_loss, match_logits,
    mine_hard_negatives, similarity_matrix, total_loss, ClfParams, LocIds, LocParams,
    LossBreakdown, MatchParams,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionMode,
    pub gate_reduction: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Width of the fused feature seen by the classifier.
    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => 2 * self.encoder.embed_dim,
            _ => self.encoder.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub visual: VisualParams,
    pub text: TextParams,
    pub joint: JointParams,
    pub gate: GateParams,
    pub loc: LocParams,
    pub matcher: MatchParams,
    pub clf: ClfParams,
    /// 1×1 learnable contrastive temperature.
    pub tau: Tensor,
}

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let e = &config.encoder;
        Ok(ModelParams {
            config: config.clone(),
            visual: VisualParams::init(e, mix_seed(seed, 1)),
            text: TextParams::init(e, mix_seed(seed, 2)),
            joint: JointParams::init(e, mix_seed(seed, 3)),
            gate: GateParams::init(e.embed_dim, config.gate_reduction, mix_seed(seed, 4))?,
            loc: LocParams::init(e.joint_dim, mix_seed(seed, 5)),
            matcher: MatchParams::init(e.joint_dim, mix_seed(seed, 6)),
            clf: ClfParams::init(config.fused_dim(), config.num_classes, mix_seed(seed, 7)),
            tau: Tensor::scalar(TAU_INIT),
        })
    }

    /// All trainable tensors in one fixed order (the optimizer contract).
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.visual.w1,
            &self.visual.b1,
            &self.visual.w2,
            &self.visual.b2,
            &self.text.table,
            &self.text.proj_w,
            &self.text.proj_b,
            &self.joint.w1,
            &self.joint.b1,
            &self.joint.w2,
            &self.joint.b2,
            &self.gate.w1,
            &self.gate.b1,
            &self.gate.w2,
            &self.gate.b2,
            &self.loc.w1,
            &self.loc.b1,
            &self.loc.w2,
            &self.loc.b2,
            &self.matcher.w,
            &self.matcher.b,
            &self.clf.w,
            &self.clf.b,
            &self.tau,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.visual.w1,
            &mut self.visual.b1,
            &mut self.visual.w2,
            &mut self.visual.b2,
            &mut self.text.table,
            &mut self.text.proj_w,
            &mut self.text.proj_b,
            &mut self.joint.w1,
            &mut self.joint.b1,
            &mut self.joint.w2,
            &mut self.joint.b2,
            &mut self.gate.w1,
            &mut self.gate.b1,
            &mut self.gate.w2,
            &mut self.gate.b2,
            &mut self.loc.w1,
            &mut self.loc.b1,
            &mut self.loc.w2,
            &mut self.loc.b2,
            &mut self.matcher.w,
            &mut self.matcher.b,
            &mut self.clf.w,
            &mut self.clf.b,
            &mut self.tau,
        ]
    }

    pub const NUM_TENSORS: usize = 24;
    /// Index of tau in the `tensors()` order.
    pub const TAU_INDEX: usize = 23;
    /// Index range of the visual+text encoder tensors (freeze flag target).
    pub const ENCODER_RANGE: std::ops::Range<usize> = 0..7;

    pub fn clamp_tau(&mut self) {
        self.tau.data[0] = self.tau.data[0].clamp(TAU_MIN, TAU_MAX);
    }
}

/// Leaf node ids for one full parameter set inside a graph.
pub struct GraphParams {
    pub order: Vec<NodeId>,
    pub visual: MlpIds,
    pub text: TextIds,
    pub joint: MlpIds,
    pub gate: GateIds,
    pub loc: LocIds,
    pub match_w: NodeId,
    pub match_b: NodeId,
    pub clf_w: NodeId,
    pub clf_b: NodeId,
    pub tau: NodeId,
}

pub fn insert_params(g: &mut Graph, p: &ModelParams) -> GraphParams {
    let visual = insert_visual(g, &p.visual);
    let text = insert_text(g, &p.text);
    let joint = insert_joint(g, &p.joint);
    let gate = insert_gate(g, &p.gate);
    let loc = insert_loc(g, &p.loc);
    let match_w = g.leaf(p.matcher.w.clone());
    let match_b = g.leaf(p.matcher.b.clone());
    let clf_w = g.leaf(p.clf.w.clone());
    let clf_b = g.leaf(p.clf.b.clone());
    let tau = g.leaf(p.tau.clone());
    GraphParams {
        order: vec![
            visual.w1, visual.b1, visual.w2, visual.b2, text.table, text.proj_w, text.proj_b,
            joint.w1, joint.b1, joint.w2, joint.b2, gate.w1, gate.b1, gate.w2, gate.b2, loc.w1,
            loc.b1, loc.w2, loc.b2, match_w, match_b, clf_w, clf_b, tau,
        ],
        visual,
        text,
        joint,
        gate,
        loc,
        match_w,
        match_b,
        clf_w,
        clf_b,
        tau,
    }
}

/// Localized-alignment supervision for one batch: `image_rows[j]` is the
/// batch row whose visual features pair with `texts[j]`, and `gt.row(j)` is
/// the target box in normalized center-size form.
#[derive(Debug, Clone)]
pub struct LaConcepts {
    pub image_rows: Vec<usize>,
    pub texts: Vec<String>,
    pub gt: Tensor,
}

/// One training batch, already rendered to patch features.
#[derive(Debug, Clone)]
pub struct ForwardBatch {
    /// B×P patch feature rows.
    pub patches: Tensor,
    /// Caption text per row; None switches to the image-only (no-text) mode.
    pub texts: Option<Vec<String>>,
    pub labels: Vec<usize>,
    pub la: Option<LaConcepts>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub breakdown: LossBreakdown,
    /// Gradients aligned with `ModelParams::tensors()`; zero tensors for
    /// parameters the active mode does not touch.
    pub grads: Vec<Tensor>,
}

/// Builds every active loss on one graph and backpropagates the total.
pub fn forward_backward(
    params: &ModelParams,
    batch: &ForwardBatch,
    freeze_encoders: bool,
) -> Result<ForwardOutput> {
    let b = batch.patches.rows;
    if b < 2 {
        return Err(CvError::invalid("training batch must have B >= 2 rows"));
    }
    if batch.labels.len() != b {
        return Err(CvError::invalid("label count must match batch size"));
    }
    if let Some(t) = &batch.texts {
        if t.len() != b {
            return Err(CvError::invalid("caption count must match batch size"));
        }
    }

    let mut g = Graph::new();
    let ids = insert_params(&mut g, params);
    let patches = g.leaf(batch.patches.clone());
    let v_pre = visual_prenorm(&mut g, &ids.visual, patches);
    let f_i = g.l2_normalize_rows(v_pre);

    let mut itc = None;
    let mut itm = None;
    let mut la = None;
    let mut loss_nodes: Vec<NodeId> = Vec::new();

    let fused = if let Some(texts) = &batch.texts {
        let bags = text_bag_batch(&params.config.encoder, texts)?;
        let bags = g.leaf(bags);
        let t_pre = text_prenorm(&mut g, &ids.text, bags);
        let f_t = g.l2_normalize_rows(t_pre);

        // ITC over the in-batch similarity matrix.
        let sim = similarity_matrix(&mut g, f_i, f_t, ids.tau);
        let itc_node = itc_loss(&mut g, sim)?;
        itc = Some(g.value(itc_node).item());
        loss_nodes.push(itc_node);

        // ITM on B positives + 2B mined hard negatives (indices detached).
        let (text_neg, image_neg) = mine_hard_negatives(g.value(sim))?;
        let mut v_rows: Vec<usize> = (0..b).collect();
        v_rows.extend(0..b);
        v_rows.extend(image_neg.iter().copied());
        let mut t_rows: Vec<usize> = (0..b).collect();
        t_rows.extend(text_neg.iter().copied());
        t_rows.extend(0..b);
        let v_sel = g.gather_rows(v_pre, &v_rows);
        let t_sel = g.gather_rows(t_pre, &t_rows);
        let cls = joint_cls(&mut g, &ids.joint, v_sel, t_sel);
        let logits = match_logits(&mut g, ids.match_w, ids.match_b, cls);
        let mut labels = vec![1.0; b];
        labels.extend(vec![0.0; 2 * b]);
        let itm_node = itm_loss(&mut g, logits, &labels)?;
        itm = Some(g.value(itm_node).item());
        loss_nodes.push(itm_node);

        // Localized alignment over concept pairs.
        if let Some(concepts) = &batch.la {
            if concepts.texts.is_empty()
                || concepts.texts.len() != concepts.image_rows.len()
                || concepts.gt.rows != concepts.texts.len()
            {
                return Err(CvError::invalid("inconsistent alignment concept batch"));
            }
            if let Some(&bad) = concepts.image_rows.iter().find(|&&r| r >= b) {
                return Err(CvError::invalid(format!(
                    "concept image row {bad} out of range"
                )));
            }
            let concept_bags = text_bag_batch(&params.config.encoder, &concepts.texts)?;
            let concept_bags = g.leaf(concept_bags);
            let concept_t_pre = text_prenorm(&mut g, &ids.text, concept_bags);
            let concept_v = g.gather_rows(v_pre, &concepts.image_rows);
            let concept_cls = joint_cls(&mut g, &ids.joint, concept_v, concept_t_pre);
            let boxes = box_head(&mut g, &ids.loc, concept_cls);
            let la_node = la_loss(&mut g, boxes, &concepts.gt)?;
            la = Some(g.value(la_node).item());
            loss_nodes.push(la_node);
        }

        fuse_variant(&mut g, params.config.fusion, Some(&ids.gate), f_i, f_t)?
    } else {
        // No-text mode: classification on the image embedding alone.
        f_i
    };

    let ce_node = ce_loss(&mut g, ids.clf_w, ids.clf_b, fused, &batch.labels)?;
    let ce = Some(g.value(ce_node).item());
    loss_nodes.push(ce_node);

    let breakdown = total_loss(itc, itm, la, ce)?;

    let mut total = loss_nodes[0];
    for &n in &loss_nodes[1..] {
        total = g.add(total, n);
    }
    let grads_by_node = g.backward(total);

    let mut grads = Vec::with_capacity(ModelParams::NUM_TENSORS);
    for (k, (&node, tensor)) in ids.order.iter().zip(params.tensors()).enumerate() {
        let frozen = freeze_encoders && ModelParams::ENCODER_RANGE.contains(&k);
        let grad = if frozen {
            Tensor::zeros(tensor.rows, tensor.cols)
        } else {
            grads_by_node[node]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(tensor.rows, tensor.cols))
        };
        if !grad.is_finite() {
            return Err(CvError::TrainStep(format!(
                "non-finite gradient in parameter tensor {k}"
            )));
        }
        grads.push(grad);
    }

    Ok(ForwardOutput { breakdown, grads })
}

/// Fused retrieval embedding for (image patches, optional caption) rows.
/// With no text the image embedding is returned unchanged.
pub fn fused_embeddings(
    params: &ModelParams,
    patches: &Tensor,
    texts: Option<&[String]>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = insert_params(&mut g, params);
    let p = g.leaf(patches.clone());
    let v_pre = visual_prenorm(&mut g, &ids.visual, p);
    let f_i = g.l2_normalize_rows(v_pre);
    let out = match texts {
        Some(texts) => {
            if texts.len() != patches.rows {
                return Err(CvError::invalid("caption count must match batch size"));
            }
            let bags = text_bag_batch(&params.config.encoder, texts)?;
            let bags = g.leaf(bags);
            let t_pre = text_prenorm(&mut g, &ids.text, bags);
            let f_t = g.l2_normalize_rows(t_pre);
            fuse_variant(&mut g, params.config.fusion, Some(&ids.gate), f_i, f_t)?
        }
        None => f_i,
    };
    Ok(g.value(out).clone())
}

/// On-disk training state: parameters plus optimizer velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Hash of the training configuration that produced this checkpoint.
    pub config_fingerprint: String,
    /// Last completed epoch.
    pub epoch: usize,
    pub global_step: usize,
    pub model: ModelParams,
    pub velocities: Vec<Tensor>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| CvError::serde(path.to_path_buf(), e))?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| CvError::io(path.to_path_buf(), e))?;
        f.write_all(body.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| CvError::io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body =
            std::fs::read_to_string(path).map_err(|e| CvError::io(path.to_path_buf(), e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&body).map_err(|e| CvError::serde(path.to_path_buf(), e))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(CvError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let shapes_ok = ckpt.velocities.len() == ModelParams::NUM_TENSORS
            && ckpt
                .model
                .tensors()
                .iter()
                .zip(&ckpt.velocities)
                .all(|(p, v)| p.rows == v.rows && p.cols == v.cols);
        if !shapes_ok {
            return Err(CvError::Checkpoint(
                "optimizer state does not mirror parameter shapes".into(),
            ));
        }
        Ok(ckpt)
    }
}

/// Stable content hash used to fingerprint configs and artifacts (FNV-1a).
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

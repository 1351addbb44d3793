//! Tiny trainable visual, text, and cross-modal joint encoders.
//!
//! Visual: non-overlapping patch mean-pooling -> linear -> tanh -> linear,
//! L2-normalized. Text: hashed-bucket bag of tokens -> embedding table ->
//! linear projection, L2-normalized. Joint: concatenation of the two
//! pre-normalization features -> two-layer GELU stack producing the
//! CLS-style vector consumed by the matching and box heads.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{CvError, Result};
use crate::imagetensor::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// D: shared embedding width of f_I and f_T.
    pub embed_dim: usize,
    pub visual_hidden: usize,
    pub vocab_buckets: usize,
    pub text_embed: usize,
    pub joint_hidden: usize,
    /// d: joint (CLS) output width.
    pub joint_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 32,
            visual_hidden: 64,
            vocab_buckets: 4096,
            text_embed: 32,
            joint_hidden: 48,
            joint_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn patch_feature_len(&self) -> usize {
        let n = self.image_size / self.patch_size;
        n * n * 3 + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CvError::Config(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.joint_dim == 0 || self.vocab_buckets == 0 {
            return Err(CvError::Config("zero-sized encoder dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
    Joint,
}

/// B×D matrix of embedding rows; visual/textual rows are unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub data: Tensor,
    pub modality: Modality,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor {
        rows,
        cols,
        data: (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl VisualParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cfg.patch_feature_len();
        VisualParams {
            w1: uniform_init(&mut rng, cfg.visual_hidden, p, p),
            b1: Tensor::zeros(1, cfg.visual_hidden),
            w2: uniform_init(&mut rng, cfg.embed_dim, cfg.visual_hidden, cfg.visual_hidden),
            b2: Tensor::zeros(1, cfg.embed_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextParams {
    /// vocab_buckets × text_embed lookup table.
    pub table: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl TextParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextParams {
            table: uniform_init(&mut rng, cfg.vocab_buckets, cfg.text_embed, cfg.text_embed),
            proj_w: uniform_init(&mut rng, cfg.embed_dim, cfg.text_embed, cfg.text_embed),
            proj_b: Tensor::zeros(1, cfg.embed_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl JointParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = 2 * cfg.embed_dim;
        JointParams {
            w1: uniform_init(&mut rng, cfg.joint_hidden, in_dim, in_dim),
            b1: Tensor::zeros(1, cfg.joint_hidden),
            w2: uniform_init(&mut rng, cfg.joint_dim, cfg.joint_hidden, cfg.joint_hidden),
            b2: Tensor::zeros(1, cfg.joint_dim),
        }
    }
}

/// Fixed (parameter-free) image frontend: per-patch mean colors centered by
/// the image-wide mean color (contrast structure), with the global mean kept
/// as three trailing features so no information is lost.
pub fn patch_features(cfg: &EncoderConfig, image: &ImageTensor) -> Result<Vec<f64>> {
    let img = if image.height == cfg.image_size && image.width == cfg.image_size {
        image.clone()
    } else {
        image.resize(cfg.image_size, cfg.image_size)
    };
    let n = cfg.image_size / cfg.patch_size;
    let mut out = Vec::with_capacity(n * n * 3 + 3);
    let area = (cfg.patch_size * cfg.patch_size) as f64;
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0; 3];
            for y in 0..cfg.patch_size {
                for x in 0..cfg.patch_size {
                    let p = img.get(py * cfg.patch_size + y, px * cfg.patch_size + x);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                }
            }
            out.extend_from_slice(&[acc[0] / area, acc[1] / area, acc[2] / area]);
        }
    }
    let np = (n * n) as f64;
    let mut global = [0.0; 3];
    for (i, v) in out.iter().enumerate() {
        global[i % 3] += v / np;
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v -= global[i % 3];
    }
    // contrast-normalize: weather mostly rescales/offsets intensities, so
    // centered, std-divided patches are far more condition-invariant
    let mut var = [0.0; 3];
    for (i, v) in out.iter().enumerate() {
        var[i % 3] += v * v / np;
    }
    let std = [var[0].sqrt() + 1e-3, var[1].sqrt() + 1e-3, var[2].sqrt() + 1e-3];
    for (i, v) in out.iter_mut().enumerate() {
        *v /= std[i % 3];
    }
    out.extend_from_slice(&global);
    Ok(out)
}

/// Batch of patch features as one leaf-able tensor.
pub fn patch_feature_batch(cfg: &EncoderConfig, images: &[ImageTensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(CvError::invalid("empty image batch"));
    }
    let shape = (images[0].height, images[0].width);
    for img in images {
        if (img.height, img.width) != shape {
            return Err(CvError::invalid("images in a batch must share one shape"));
        }
        if !img.in_unit_range() {
            return Err(CvError::invalid("image values must be in [0,1]"));
        }
    }
    let rows: Vec<Vec<f64>> = images
        .iter()
        .map(|i| patch_features(cfg, i))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_rows(&rows))
}

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Token-hash bag vector, mean-weighted over tokens.
pub fn text_bag(cfg: &EncoderConfig, text: &str) -> Result<Vec<f64>> {
    let tokens: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        return Err(CvError::invalid("text has no tokens"));
    }
    let mut bag = vec![0.0; cfg.vocab_buckets];
    let w = 1.0 / tokens.len() as f64;
    for t in &tokens {
        bag[(fnv1a(t) % cfg.vocab_buckets as u64) as usize] += w;
    }
    Ok(bag)
}

pub fn text_bag_batch(cfg: &EncoderConfig, texts: &[String]) -> Result<Tensor> {
    if texts.is_empty() {
        return Err(CvError::invalid("empty text batch"));
    }
    let rows: Vec<Vec<f64>> = texts.iter().map(|t| text_bag(cfg, t)).collect::<Result<_>>()?;
    Ok(Tensor::from_rows(&rows))
}

/// Node ids of one parameter set inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct TextIds {
    pub table: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

pub fn insert_visual(g: &mut Graph, p: &VisualParams) -> MlpIds {
    MlpIds {
        w1: g.leaf(p.w1.clone()),
        b1: g.leaf(p.b1.clone()),
        w2: g.leaf(p.w2.clone()),
        b2: g.leaf(p.b2.clone()),
    }
}

pub fn insert_text(g: &mut Graph, p: &TextParams) -> TextIds {
    TextIds {
        table: g.leaf(p.table.clone()),
        proj_w: g.leaf(p.proj_w.clone()),
        proj_b: g.leaf(p.proj_b.clone()),
    }
}

pub fn insert_joint(g: &mut Graph, p: &JointParams) -> MlpIds {
    MlpIds {
        w1: g.leaf(p.w1.clone()),
        b1: g.leaf(p.b1.clone()),
        w2: g.leaf(p.w2.clone()),
        b2: g.leaf(p.b2.clone()),
    }
}

/// Pre-normalization visual features (B × D).
pub fn visual_prenorm(g: &mut Graph, ids: &MlpIds, patches: NodeId) -> NodeId {
    let h = g.matmul_nt(patches, ids.w1);
    let h = g.add_bias(h, ids.b1);
    let h = g.tanh(h);
    let pre = g.matmul_nt(h, ids.w2);
    g.add_bias(pre, ids.b2)
}

/// Pre-normalization text features (B × D).
pub fn text_prenorm(g: &mut Graph, ids: &TextIds, bags: NodeId) -> NodeId {
    let emb = g.matmul(bags, ids.table);
    let pre = g.matmul_nt(emb, ids.proj_w);
    g.add_bias(pre, ids.proj_b)
}

/// Joint CLS vectors (N × d) from paired pre-normalization rows.
pub fn joint_cls(g: &mut Graph, ids: &MlpIds, v_pre: NodeId, t_pre: NodeId) -> NodeId {
    let cat = g.concat_cols(v_pre, t_pre);
    let h = g.matmul_nt(cat, ids.w1);
    let h = g.add_bias(h, ids.b1);
    let h = g.gelu(h);
    let out = g.matmul_nt(h, ids.w2);
    g.add_bias(out, ids.b2)
}

/// Forward-only image encoding, unit-norm rows.
pub fn encode_image(
    cfg: &EncoderConfig,
    params: &VisualParams,
    images: &[ImageTensor],
) -> Result<EmbeddingBatch> {
    let patches = patch_feature_batch(cfg, images)?;
    let mut g = Graph::new();
    let x = g.leaf(patches);
    let ids = insert_visual(&mut g, params);
    let pre = visual_prenorm(&mut g, &ids, x);
    let norm = g.l2_normalize_rows(pre);
    Ok(EmbeddingBatch {
        data: g.value(norm).clone(),
        modality: Modality::Visual,
    })
}

/// Forward-only text encoding, unit-norm rows.
pub fn encode_text(
    cfg: &EncoderConfig,
    params: &TextParams,
    texts: &[String],
) -> Result<EmbeddingBatch> {
    let bags = text_bag_batch(cfg, texts)?;
    let mut g = Graph::new();
    let x = g.leaf(bags);
    let ids = insert_text(&mut g, params);
    let pre = text_prenorm(&mut g, &ids, x);
    let norm = g.l2_normalize_rows(pre);
    Ok(EmbeddingBatch {
        data: g.value(norm).clone(),
        modality: Modality::Textual,
    })
}

/// Forward-only joint CLS vector for a single (image, text) pair.
pub fn encode_joint(
    cfg: &EncoderConfig,
    visual: &VisualParams,
    text: &TextParams,
    joint: &JointParams,
    image: &ImageTensor,
    text_input: &str,
) -> Result<Vec<f64>> {
    let patches = patch_feature_batch(cfg, std::slice::from_ref(image))?;
    let bags = text_bag_batch(cfg, &[text_input.to_string()])?;
    let mut g = Graph::new();
    let xi = g.leaf(patches);
    let xt = g.leaf(bags);
    let vid = insert_visual(&mut g, visual);
    let tid = insert_text(&mut g, text);
    let jid = insert_joint(&mut g, joint);
    let v_pre = visual_prenorm(&mut g, &vid, xi);
    let t_pre = text_prenorm(&mut g, &tid, xt);
    let cls = joint_cls(&mut g, &jid, v_pre, t_pre);
    Ok(g.value(cls).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            visual_hidden: 10,
            vocab_buckets: 64,
            text_embed: 6,
            joint_hidden: 12,
            joint_dim: 8,
        }
    }

    fn test_image(shift: f64) -> ImageTensor {
        let mut img = ImageTensor::filled(16, 16, [0.3, 0.4, 0.5]);
        for y in 0..16 {
            for x in 0..16 {
                if (x + y) % 3 == 0 {
                    img.set(y, x, [(0.1 + shift).min(1.0), 0.9, 0.2]);
                }
            }
        }
        img
    }

    #[test]
    fn image_rows_are_unit_norm_and_deterministic() {
        let cfg = small_cfg();
        let p = VisualParams::init(&cfg, 3);
        let batch = encode_image(&cfg, &p, &[test_image(0.0), test_image(0.0)]).unwrap();
        assert_eq!(batch.data.rows, 2);
        assert_eq!(batch.data.cols, 8);
        assert_eq!(batch.data.row(0), batch.data.row(1));
        for i in 0..2 {
            let n: f64 = batch.data.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn perturbed_patch_changes_embedding() {
        let cfg = small_cfg();
        let p = VisualParams::init(&cfg, 3);
        let a = encode_image(&cfg, &p, &[test_image(0.0)]).unwrap();
        let b = encode_image(&cfg, &p, &[test_image(0.4)]).unwrap();
        assert_ne!(a.data.row(0), b.data.row(0));
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let cfg = small_cfg();
        let p = VisualParams::init(&cfg, 3);
        let other = ImageTensor::filled(8, 8, [0.5; 3]);
        assert!(encode_image(&cfg, &p, &[test_image(0.0), other]).is_err());
    }

    #[test]
    fn text_rows_unit_norm_equivariant_and_distinct() {
        let cfg = small_cfg();
        let p = TextParams::init(&cfg, 5);
        let t1 = "dense fog".to_string();
        let t2 = "clear sky".to_string();
        let ab = encode_text(&cfg, &p, &[t1.clone(), t2.clone()]).unwrap();
        let ba = encode_text(&cfg, &p, &[t2, t1]).unwrap();
        assert_eq!(ab.data.row(0), ba.data.row(1));
        assert_eq!(ab.data.row(1), ba.data.row(0));
        let cos: f64 = ab
            .data
            .row(0)
            .iter()
            .zip(ab.data.row(1))
            .map(|(a, b)| a * b)
            .sum();
        assert!(cos < 1.0 - 1e-9);
        for i in 0..2 {
            let n: f64 = ab.data.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_text_rejected() {
        let cfg = small_cfg();
        let p = TextParams::init(&cfg, 5);
        assert!(encode_text(&cfg, &p, &["".to_string()]).is_err());
    }

    #[test]
    fn joint_vector_has_configured_dim_and_reacts_to_text() {
        let cfg = small_cfg();
        let v = VisualParams::init(&cfg, 1);
        let t = TextParams::init(&cfg, 2);
        let j = JointParams::init(&cfg, 3);
        let img = test_image(0.0);
        let a = encode_joint(&cfg, &v, &t, &j, &img, "red block north").unwrap();
        let b = encode_joint(&cfg, &v, &t, &j, &img, "blue strip south").unwrap();
        let a2 = encode_joint(&cfg, &v, &t, &j, &img, "red block north").unwrap();
        assert_eq!(a.len(), cfg.joint_dim);
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}

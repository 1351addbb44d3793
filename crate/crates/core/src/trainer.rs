//! Deterministic SGD training loop: batch assembly with weather-then-crop/flip
//! augmentation, momentum updates with coupled weight decay, the two-drop
//! learning-rate schedule, per-step logging, and JSON checkpointing.

use crate::autodiff::Tensor;
use crate::captions::{load_records, CaptionRecord};
use crate::dataset::{mix_seed, scan_dataset, ViewKind};
use crate::encoders::{patch_feature_batch, EncoderConfig};
use crate::error::{CvError, Result};
use crate::fusion::FusionMode;
use crate::imagetensor::ImageTensor;
use crate::model::{
    fingerprint, forward_backward, Checkpoint, ForwardBatch, LaConcepts, ModelConfig,
    ModelParams, CHECKPOINT_VERSION,
};
use crate::weather::condition_suite;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Caption depth used for a run: either the no-text mode or a staged
/// prompt count in {0, 2, 4, 6}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotMode {
    NoText,
    Steps(u8),
}

impl CotMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nan" | "NAN" => Ok(CotMode::NoText),
            "0" => Ok(CotMode::Steps(0)),
            "2" => Ok(CotMode::Steps(2)),
            "4" => Ok(CotMode::Steps(4)),
            "6" => Ok(CotMode::Steps(6)),
            other => Err(CvError::Config(format!(
                "unknown cot mode '{other}' (expected nan|0|2|4|6)"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            CotMode::NoText => "nan".to_string(),
            CotMode::Steps(k) => k.to_string(),
        }
    }

    pub fn uses_text(&self) -> bool {
        !matches!(self, CotMode::NoText)
    }
}

impl Serialize for CotMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for CotMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CotMode::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub epoch: usize,
    /// Multiplier applied to the base rate (not to the previous segment).
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_drops: Vec<LrDrop>,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion: FusionMode,
    pub cot: CotMode,
    pub freeze_encoders: bool,
    /// Epoch cadence for intermediate checkpoints; 0 = final only.
    pub checkpoint_every: usize,
    /// Optional hard cap on optimizer steps (overrides epochs when hit).
    pub max_steps: Option<usize>,
    /// Optional global L2-norm gradient clip applied before the update.
    pub grad_clip: Option<f64>,
    pub encoder: EncoderConfig,
    pub gate_reduction: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 210,
            lr_drops: vec![
                LrDrop {
                    epoch: 120,
                    factor: 0.1,
                },
                LrDrop {
                    epoch: 180,
                    factor: 0.01,
                },
            ],
            batch_size: 32,
            seed: 0,
            fusion: FusionMode::DynamicGate,
            cot: CotMode::Steps(6),
            freeze_encoders: false,
            checkpoint_every: 0,
            max_steps: None,
            grad_clip: None,
            encoder: EncoderConfig::default(),
            gate_reduction: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(CvError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CvError::Config(
                "batch_size must be >= 2 (contrastive loss needs in-batch negatives)".into(),
            ));
        }
        if self.base_lr <= 0.0 {
            return Err(CvError::Config("base_lr must be positive".into()));
        }
        if !self.lr_drops.windows(2).all(|w| w[0].epoch < w[1].epoch) {
            return Err(CvError::Config("lr_drops must be sorted ascending".into()));
        }
        if self.lr_drops.iter().any(|d| d.factor <= 0.0) {
            return Err(CvError::Config("lr drop factors must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(CvError::Config("grad_clip must be positive".into()));
            }
        }
        self.encoder.validate()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Piecewise-constant schedule; every factor is relative to the base rate.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(CvError::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    let mut factor = 1.0;
    for d in &cfg.lr_drops {
        if epoch >= d.epoch {
            factor = d.factor;
        }
    }
    Ok(cfg.base_lr * factor)
}

/// Rescales all gradients in place so their joint L2 norm is at most
/// `max_norm`; a no-op when the norm is already within bounds.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// One classic momentum update with coupled weight decay:
/// v <- momentum*v + (grad + wd*param); param <- param - lr*v.
pub fn sgd_update(
    param: &mut Tensor,
    vel: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.rows != grad.rows
        || param.cols != grad.cols
        || param.rows != vel.rows
        || param.cols != vel.cols
    {
        return Err(CvError::TrainStep("optimizer shape mismatch".into()));
    }
    if !grad.is_finite() {
        return Err(CvError::TrainStep("non-finite gradient".into()));
    }
    for i in 0..param.data.len() {
        vel.data[i] = momentum * vel.data[i] + (grad.data[i] + weight_decay * param.data[i]);
        param.data[i] -= lr * vel.data[i];
    }
    Ok(())
}

/// In-memory training corpus: every image variant and its caption, loaded
/// once so the loop never touches disk.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub num_classes: usize,
    pub units: Vec<UnitData>,
}

#[derive(Debug, Clone)]
pub struct UnitData {
    pub label: usize,
    /// One clean variant for satellites, one per weather condition for drones.
    pub variants: Vec<VariantData>,
}

#[derive(Debug, Clone)]
pub struct VariantData {
    pub image: ImageTensor,
    pub text: Option<String>,
    pub la_texts: Option<Vec<String>>,
    pub la_boxes: Option<Vec<[f64; 4]>>,
}

fn la_from_record(rec: &CaptionRecord) -> (Vec<String>, Vec<[f64; 4]>) {
    // Concept 0 pairs the spatial description with the tight box around all
    // hinted regions; concepts 1..3 pair each hint phrase with its region.
    let mut x0: f64 = 1.0;
    let mut y0: f64 = 1.0;
    let mut x1: f64 = 0.0;
    let mut y1: f64 = 0.0;
    for r in &rec.region_boxes {
        x0 = x0.min(r.cx - r.w / 2.0);
        y0 = y0.min(r.cy - r.h / 2.0);
        x1 = x1.max(r.cx + r.w / 2.0);
        y1 = y1.max(r.cy + r.h / 2.0);
    }
    let mut texts = vec![rec.spatial_text.clone()];
    let mut boxes = vec![[
        ((x0 + x1) / 2.0).clamp(0.0, 1.0),
        ((y0 + y1) / 2.0).clamp(0.0, 1.0),
        (x1 - x0).clamp(0.0, 1.0),
        (y1 - y0).clamp(0.0, 1.0),
    ]];
    for (hint, r) in rec.region_hints.iter().zip(&rec.region_boxes) {
        texts.push(hint.clone());
        boxes.push([r.cx, r.cy, r.w, r.h]);
    }
    (texts, boxes)
}

/// Relative path of the weather-synthesized variant of a drone image.
pub fn weather_variant_rel(split: &str, condition: &str, loc: usize, file: &str) -> String {
    format!("weather/{split}/{condition}/{loc:04}/{file}")
}

pub fn captions_file(root: &Path, steps: u8) -> PathBuf {
    root.join(format!("captions_cot{steps}.jsonl"))
}

/// Loads the prepared split plus weather variants and captions into memory.
pub fn load_train_data(root: &Path, split: &str, cot: CotMode) -> Result<TrainData> {
    let index = scan_dataset(root, split)?;
    let captions: BTreeMap<String, CaptionRecord> = match cot {
        CotMode::NoText => BTreeMap::new(),
        CotMode::Steps(k) => {
            let path = captions_file(root, k);
            load_records(&path)?
                .into_iter()
                .map(|r| (r.image_ref.clone(), r))
                .collect()
        }
    };
    let lookup = |rel: &str| -> Result<(Option<String>, Option<Vec<String>>, Option<Vec<[f64; 4]>>)> {
        if !cot.uses_text() {
            return Ok((None, None, None));
        }
        let rec = captions
            .get(rel)
            .ok_or_else(|| CvError::MissingCaption(rel.to_string()))?;
        let (texts, boxes) = la_from_record(rec);
        Ok((Some(rec.full_text()), Some(texts), Some(boxes)))
    };

    let suite = condition_suite();
    let mut units = Vec::new();
    for entry in &index.entries {
        let rel = entry
            .image_ref
            .strip_prefix(root)
            .unwrap_or(&entry.image_ref)
            .to_string_lossy()
            .replace('\\', "/");
        match entry.view_kind {
            ViewKind::Satellite => {
                let image = ImageTensor::load_png(&entry.image_ref)?;
                let (text, la_texts, la_boxes) = lookup(&rel)?;
                units.push(UnitData {
                    label: entry.location_id,
                    variants: vec![VariantData {
                        image,
                        text,
                        la_texts,
                        la_boxes,
                    }],
                });
            }
            ViewKind::Drone => {
                let file = entry
                    .image_ref
                    .file_name()
                    .and_then(|f| f.to_str())
                    .ok_or_else(|| CvError::Structure(format!("bad path {rel}")))?
                    .to_string();
                let mut variants = Vec::with_capacity(suite.len());
                for (name, _) in &suite {
                    let vrel = weather_variant_rel(split, name, entry.location_id, &file);
                    let vpath = root.join(&vrel);
                    let image = ImageTensor::load_png(&vpath)?;
                    let (text, la_texts, la_boxes) = lookup(&vrel)?;
                    variants.push(VariantData {
                        image,
                        text,
                        la_texts,
                        la_boxes,
                    });
                }
                units.push(UnitData {
                    label: entry.location_id,
                    variants,
                });
            }
        }
    }
    Ok(TrainData {
        num_classes: index.num_locations,
        units,
    })
}

/// Random square crop (87.5% side) resized back, then optional horizontal
/// flip; returns the augmented image plus the normalized-coordinate map
/// (offset_x, offset_y, scale, flipped) applied to boxes.
fn crop_flip(
    image: &ImageTensor,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, (f64, f64, f64, bool)) {
    let h = image.height;
    let w = image.width;
    let ch = (h * 7) / 8;
    let cw = (w * 7) / 8;
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let flip = rng.random::<f64>() < 0.5;
    let mut out = ImageTensor::filled(ch, cw, [0.0; 3]);
    for y in 0..ch {
        for x in 0..cw {
            let sx = if flip { cw - 1 - x } else { x };
            out.set(y, x, image.get(oy + y, ox + sx));
        }
    }
    let out = out.resize(h, w);
    (
        out,
        (
            ox as f64 / w as f64,
            oy as f64 / h as f64,
            cw as f64 / w as f64,
            flip,
        ),
    )
}

fn map_box(b: [f64; 4], (ox, oy, s, flip): (f64, f64, f64, bool)) -> [f64; 4] {
    let mut cx = (b[0] - ox) / s;
    let cy = (b[1] - oy) / s;
    if flip {
        cx = 1.0 - cx;
    }
    let w = (b[2] / s).clamp(0.0, 1.0);
    let h = (b[3] / s).clamp(0.0, 1.0);
    [cx.clamp(0.0, 1.0), cy.clamp(0.0, 1.0), w, h]
}

/// Assembles one batch: drone rows draw a weather variant uniformly (the
/// corruption precedes crop/flip by construction), satellite rows are
/// crop/flip only.
pub fn build_batch(
    data: &TrainData,
    encoder: &EncoderConfig,
    unit_ids: &[usize],
    use_text: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardBatch> {
    let mut images = Vec::with_capacity(unit_ids.len());
    let mut texts: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(unit_ids.len());
    let mut la_rows = Vec::new();
    let mut la_texts = Vec::new();
    let mut la_boxes: Vec<Vec<f64>> = Vec::new();
    for (row, &u) in unit_ids.iter().enumerate() {
        let unit = &data.units[u];
        let variant = if unit.variants.len() == 1 {
            &unit.variants[0]
        } else {
            &unit.variants[rng.random_range(0..unit.variants.len())]
        };
        let (img, boxmap) = crop_flip(&variant.image, rng);
        images.push(img);
        labels.push(unit.label);
        if use_text {
            let text = variant
                .text
                .clone()
                .ok_or_else(|| CvError::MissingCaption(format!("unit {u}")))?;
            texts.push(text);
            if let (Some(ct), Some(cb)) = (&variant.la_texts, &variant.la_boxes) {
                for (t, b) in ct.iter().zip(cb) {
                    la_rows.push(row);
                    la_texts.push(t.clone());
                    la_boxes.push(map_box(*b, boxmap).to_vec());
                }
            }
        }
    }
    let patches = patch_feature_batch(encoder, &images)?;
    let la = if use_text && !la_texts.is_empty() {
        Some(LaConcepts {
            image_rows: la_rows,
            texts: la_texts,
            gt: Tensor::from_rows(&la_boxes),
        })
    } else {
        None
    };
    Ok(ForwardBatch {
        patches,
        texts: if use_text { Some(texts) } else { None },
        labels,
        la,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub itc: Option<f64>,
    pub itm: Option<f64>,
    pub la: Option<f64>,
    pub ce: Option<f64>,
    pub total: f64,
    pub tau: f64,
}

impl StepLog {
    pub fn render(&self) -> String {
        let f = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6}"),
            None => "-".to_string(),
        };
        format!(
            "step={} lr={:.6} L_ITC={} L_ITM={} L_LA={} L_CE={} L_total={:.6} tau={:.6}",
            self.step,
            self.lr,
            f(self.itc),
            f(self.itm),
            f(self.la),
            f(self.ce),
            self.total,
            self.tau
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub history: Vec<StepLog>,
    pub completed_epochs: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0xEB0C), epoch as u64))
}

fn ckpt_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("ckpt_epoch_{epoch}.json"))
}

/// Runs (or resumes) the full loop. Deterministic given (config, data, seed):
/// every random draw derives from the config seed and the epoch number, so a
/// resumed run retraces the interrupted trajectory exactly.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.units.len() < 2 {
        return Err(CvError::invalid("need at least 2 training units"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CvError::io(out_dir, e))?;
    let fp = cfg.fingerprint();

    let model_cfg = ModelConfig {
        encoder: cfg.encoder.clone(),
        fusion: cfg.fusion,
        gate_reduction: cfg.gate_reduction,
        num_classes: data.num_classes,
    };
    let (mut model, mut velocities, start_epoch, mut global_step) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_fingerprint != fp {
                return Err(CvError::Checkpoint(
                    "checkpoint was produced by a different configuration".into(),
                ));
            }
            (
                ckpt.model,
                ckpt.velocities,
                ckpt.epoch + 1,
                ckpt.global_step,
            )
        }
        None => {
            let model = ModelParams::init(&model_cfg, mix_seed(cfg.seed, 0x0DE1))?;
            let velocities = model
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect();
            (model, velocities, 0, 0)
        }
    };

    let log_path = out_dir.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CvError::io(&log_path, e))?;

    let save = |model: &ModelParams, velocities: &[Tensor], epoch: usize, step: usize| {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_fingerprint: fp.clone(),
            epoch,
            global_step: step,
            model: model.clone(),
            velocities: velocities.to_vec(),
        };
        ckpt.save(&ckpt_path(out_dir, epoch))
    };

    let mut history = Vec::new();
    let mut last_epoch = start_epoch.saturating_sub(1);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(cfg, epoch)?;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.units.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a 1-item tail cannot form contrastive pairs
            }
            if global_step >= max_steps {
                break 'epochs;
            }
            let batch = build_batch(data, &cfg.encoder, chunk, cfg.cot.uses_text(), &mut rng)?;
            let mut out = match forward_backward(&model, &batch, cfg.freeze_encoders) {
                Ok(out) => out,
                Err(e) => {
                    // Parameters were not touched by the failing step; keep
                    // them as the last good checkpoint before aborting.
                    save(&model, &velocities, epoch, global_step)?;
                    return Err(e);
                }
            };
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut out.grads, max_norm);
            }
            for ((param, vel), grad) in model
                .tensors_mut()
                .into_iter()
                .zip(velocities.iter_mut())
                .zip(out.grads.iter())
            {
                sgd_update(param, vel, grad, lr, cfg.momentum, cfg.weight_decay)?;
            }
            model.clamp_tau();
            global_step += 1;
            let entry = StepLog {
                step: global_step,
                epoch,
                lr,
                itc: out.breakdown.itc,
                itm: out.breakdown.itm,
                la: out.breakdown.la,
                ce: out.breakdown.ce,
                total: out.breakdown.total,
                tau: model.tau.data[0],
            };
            writeln!(log, "{}", entry.render()).map_err(|e| CvError::io(&log_path, e))?;
            history.push(entry);
        }
        last_epoch = epoch;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save(&model, &velocities, epoch, global_step)?;
        }
        if global_step >= max_steps {
            break;
        }
    }
    save(&model, &velocities, last_epoch, global_step)?;
    Ok(TrainOutcome {
        final_checkpoint: ckpt_path(out_dir, last_epoch),
        history,
        completed_epochs: last_epoch + 1,
    })
}

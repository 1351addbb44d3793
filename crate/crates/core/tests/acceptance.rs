//! End-to-end acceptance suite. Each test prints exactly one PASS/FAIL line
//! for its criterion; a FAIL line is followed by a panic with the detail.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossview::autodiff::{Graph, Tensor};
use crossview::captions::{
    generate_caption_record, CaptionStatus, CotConfig, ScriptedClient, ValidationLexicons,
};
use crossview::config::ExperimentConfig;
use crossview::dataset::GroundTruthRegion;
use crossview::encoders::EncoderConfig;
use crossview::eval::{average_precision, rank_gallery, recall_at_k, Direction};
use crossview::fusion::{fuse_values, gate_values, FusionMode, GateParams};
use crossview::imagetensor::ImageTensor;
use crossview::model::{
    forward_backward, ForwardBatch, LaConcepts, ModelConfig, ModelParams,
};
use crossview::objectives::{itc_loss, itm_loss, mine_hard_negatives};
use crossview::pipeline::{generate_captions, prepare, run_evaluate, run_train, synthesize_weather};
use crossview::trainer::{lr_at, TrainConfig};

fn report(n: u32, name: &str, r: Result<(), String>) {
    match r {
        Ok(()) => println!("criterion {n} ({name}): PASS"),
        Err(e) => {
            println!("criterion {n} ({name}): FAIL - {e}");
            panic!("criterion {n} ({name}) failed: {e}");
        }
    }
}

fn fresh_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "crossview-acceptance-{tag}-{}",
        std::process::id()
    ));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- criterion 1

fn check_grads() -> Result<(), String> {
    let started = Instant::now();
    let enc = EncoderConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        visual_hidden: 12,
        vocab_buckets: 64,
        text_embed: 16,
        joint_hidden: 12,
        joint_dim: 8,
    };
    let cfg = ModelConfig {
        encoder: enc,
        fusion: FusionMode::DynamicGate,
        gate_reduction: 4,
        num_classes: 5,
    };
    let mut params = ModelParams::init(&cfg, 42).map_err(|e| e.to_string())?;
    // move the gate off its exact zero init so gradients flow through W1/b1
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for ti in [13usize, 14] {
        let mut tensors = params.tensors_mut();
        for v in tensors[ti].data.iter_mut() {
            *v = 0.2 * (rng.random::<f64>() - 0.5);
        }
    }
    let p = 2 * 2 * 3 + 3; // patch feature width for a 16/8 layout
    let patches = Tensor::from_rows(
        &(0..4)
            .map(|r| (0..p).map(|i| 0.05 + 0.9 * ((i + 3 * r) % 11) as f64 / 11.0).collect())
            .collect::<Vec<_>>(),
    );
    let batch = ForwardBatch {
        patches,
        texts: Some(vec![
            "weather: clear. red block north, blue strip south".into(),
            "weather: fog. cyan block center, white strip east".into(),
            "weather: rain. yellow block west, charcoal block south".into(),
            "weather: snow. purple block north-east, orange strip center".into(),
        ]),
        labels: vec![0, 1, 2, 3],
        la: Some(LaConcepts {
            image_rows: vec![0, 1, 2, 3],
            texts: vec![
                "the whole scene".into(),
                "red block".into(),
                "blue strip".into(),
                "cyan block".into(),
            ],
            gt: Tensor::from_rows(&[
                vec![0.5, 0.5, 0.8, 0.8],
                vec![0.3, 0.4, 0.2, 0.2],
                vec![0.6, 0.5, 0.4, 0.1],
                vec![0.5, 0.6, 0.25, 0.3],
            ]),
        }),
    };
    let analytic = forward_backward(&params, &batch, false).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = params.tensors()[ti].data[k];
            params.tensors_mut()[ti].data[k] = orig + eps;
            let lp = forward_backward(&params, &batch, false)
                .map_err(|e| e.to_string())?
                .breakdown
                .total;
            params.tensors_mut()[ti].data[k] = orig - eps;
            let lm = forward_backward(&params, &batch, false)
                .map_err(|e| e.to_string())?
                .breakdown
                .total;
            params.tensors_mut()[ti].data[k] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic.grads[ti].data[k];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-4 {
                // below the central-difference noise floor: compare absolutely
                if (fd - an).abs() > 1e-9 {
                    return Err(format!(
                        "tensor {ti} entry {k}: near-zero gradients differ ({an:.3e} vs {fd:.3e})"
                    ));
                }
                continue;
            }
            let rel = (fd - an).abs() / denom;
            worst = worst.max(rel);
            if rel > 1e-5 {
                return Err(format!(
                    "tensor {ti} entry {k}: analytic {an:.3e} vs finite-diff {fd:.3e} (rel {rel:.3e})"
                ));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("gradient check took {secs:.1}s (budget 120s)"));
    }
    println!("  worst relative error {worst:.3e} in {secs:.1}s");
    Ok(())
}

#[test]
fn criterion_01_gradient_exactness() {
    report(1, "gradient exactness vs central finite differences", check_grads());
}

// ---------------------------------------------------------------- criterion 2

fn itc_value(s: &Tensor) -> Result<f64, String> {
    let mut g = Graph::new();
    let sim = g.leaf(s.clone());
    let l = itc_loss(&mut g, sim).map_err(|e| e.to_string())?;
    Ok(g.value(l).data[0])
}

fn itc_oracle(s: &Tensor) -> f64 {
    // plain-loop symmetric InfoNCE with max-shifted log-sum-exp
    let b = s.rows;
    let lse = |vals: &[f64]| {
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| s.data[i * b + j]).collect();
        let col: Vec<f64> = (0..b).map(|j| s.data[j * b + i]).collect();
        total += (s.data[i * b + i] - lse(&row)) + (s.data[i * b + i] - lse(&col));
    }
    -total / (2.0 * b as f64)
}

fn ce_value(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let ce = g.cross_entropy_mean(l, labels);
    g.value(ce).data[0]
}

fn ce_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = (logits.rows, logits.cols);
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..c).map(|j| logits.data[i * c + j]).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / n as f64
}

fn itm_value(logits: &Tensor, labels: &[f64]) -> Result<f64, String> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = itm_loss(&mut g, l, labels).map_err(|e| e.to_string())?;
    Ok(g.value(loss).data[0])
}

fn itm_oracle(logits: &Tensor, labels: &[f64]) -> f64 {
    // numerically stable BCE-with-logits, mean over pairs
    let mut total = 0.0;
    for (x, y) in logits.data.iter().zip(labels) {
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    total / labels.len() as f64
}

fn check_loss_oracles() -> Result<(), String> {
    // closed forms
    let ident = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let v = itc_value(&ident)?;
    let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    if (v - expect).abs() > 1e-10 {
        return Err(format!("identity ITC {v} != {expect}"));
    }
    let zeros10 = Tensor::zeros(3, 10);
    if (ce_value(&zeros10, &[0, 4, 9]) - 10f64.ln()).abs() > 1e-10 {
        return Err("uniform-logit CE != ln 10".into());
    }
    let zl = Tensor::zeros(6, 1);
    let lbl = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    if (itm_value(&zl, &lbl)? - 2f64.ln()).abs() > 1e-10 {
        return Err("zero-logit ITM != ln 2".into());
    }
    // randomized brute-force comparisons
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for trial in 0..100 {
        let b = rng.random_range(2..=6usize);
        let s = Tensor {
            rows: b,
            cols: b,
            data: (0..b * b).map(|_| 6.0 * (rng.random::<f64>() - 0.5)).collect(),
        };
        let (got, want) = (itc_value(&s)?, itc_oracle(&s));
        if (got - want).abs() > 1e-10 {
            return Err(format!("ITC trial {trial}: {got} vs oracle {want}"));
        }
        let (n, c) = (rng.random_range(1..=5usize), rng.random_range(2..=8usize));
        let logits = Tensor {
            rows: n,
            cols: c,
            data: (0..n * c).map(|_| 8.0 * (rng.random::<f64>() - 0.5)).collect(),
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (got, want) = (ce_value(&logits, &labels), ce_oracle(&logits, &labels));
        if (got - want).abs() > 1e-10 {
            return Err(format!("CE trial {trial}: {got} vs oracle {want}"));
        }
        let bb = rng.random_range(1..=4usize);
        let ml = Tensor {
            rows: 3 * bb,
            cols: 1,
            data: (0..3 * bb).map(|_| 10.0 * (rng.random::<f64>() - 0.5)).collect(),
        };
        let mut ylab = vec![1.0; bb];
        ylab.extend(vec![0.0; 2 * bb]);
        let (got, want) = (itm_value(&ml, &ylab)?, itm_oracle(&ml, &ylab));
        if (got - want).abs() > 1e-10 {
            return Err(format!("ITM trial {trial}: {got} vs oracle {want}"));
        }
    }
    Ok(())
}

#[test]
fn criterion_02_loss_value_oracles() {
    report(2, "loss values match closed forms and brute-force oracles", check_loss_oracles());
}

// ---------------------------------------------------------------- criterion 3

fn check_gate_properties() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for trial in 0..1000 {
        let d = *[8usize, 16, 32].get(trial % 3).unwrap();
        let mut gate = GateParams::init(d, 4, trial as u64).map_err(|e| e.to_string())?;
        for v in gate.w2.data.iter_mut().chain(gate.b2.data.iter_mut()) {
            *v = 3.0 * (rng.random::<f64>() - 0.5);
        }
        let rows = rng.random_range(1..=4usize);
        let mk = |rng: &mut ChaCha8Rng| Tensor {
            rows,
            cols: d,
            data: (0..rows * d).map(|_| 2.0 * (rng.random::<f64>() - 0.5)).collect(),
        };
        let (fi, ft) = (mk(&mut rng), mk(&mut rng));
        let g = gate_values(&gate, &ft).map_err(|e| e.to_string())?;
        if g.data.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(format!("trial {trial}: gate left the open interval (0,1)"));
        }
        let fused = fuse_values(FusionMode::DynamicGate, Some(&gate), &fi, &ft)
            .map_err(|e| e.to_string())?;
        for k in 0..fused.data.len() {
            let (a, b) = (fi.data[k], ft.data[k]);
            let (lo, hi) = (a.min(b), a.max(b));
            let f = fused.data[k];
            if f < lo - 1e-12 || f > hi + 1e-12 {
                return Err(format!(
                    "trial {trial} entry {k}: fused {f} outside [{lo}, {hi}]"
                ));
            }
        }
        // zero-init dynamic must be bit-exactly the static average
        let zero = GateParams::zeros(d, 4).map_err(|e| e.to_string())?;
        let dyn_out = fuse_values(FusionMode::DynamicGate, Some(&zero), &fi, &ft)
            .map_err(|e| e.to_string())?;
        let stat = fuse_values(FusionMode::StaticGate, None, &fi, &ft)
            .map_err(|e| e.to_string())?;
        if dyn_out
            .data
            .iter()
            .zip(&stat.data)
            .any(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Err(format!("trial {trial}: zero-init dynamic != static bitwise"));
        }
    }
    Ok(())
}

#[test]
fn criterion_03_gate_properties() {
    report(3, "gate range, convex betweenness, zero-init equivalence", check_gate_properties());
}

// ---------------------------------------------------------------- criterion 4

fn brute_negatives(s: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let b = s.rows;
    let mut text_neg = Vec::new();
    let mut image_neg = Vec::new();
    for i in 0..b {
        let mut best = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let v = s.data[i * b + j];
            best = match best {
                None => Some((j, v)),
                Some((_, bv)) if v > bv => Some((j, v)),
                keep => keep,
            };
        }
        text_neg.push(best.unwrap().0);
        let mut best = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let v = s.data[j * b + i];
            best = match best {
                None => Some((j, v)),
                Some((_, bv)) if v > bv => Some((j, v)),
                keep => keep,
            };
        }
        image_neg.push(best.unwrap().0);
    }
    (text_neg, image_neg)
}

fn check_itm_construction() -> Result<(), String> {
    // exhaustive over a value grid for B = 2 and 3 (ties included)
    let grid = [-1.0, 0.0, 0.5, 1.0];
    for b in [2usize, 3] {
        let cells = b * b;
        let total = grid.len().pow(cells as u32);
        for code in 0..total {
            let mut c = code;
            let mut data = Vec::with_capacity(cells);
            for _ in 0..cells {
                data.push(grid[c % grid.len()]);
                c /= grid.len();
            }
            let s = Tensor { rows: b, cols: b, data };
            let got = mine_hard_negatives(&s).map_err(|e| e.to_string())?;
            if got != brute_negatives(&s) {
                return Err(format!("B={b} grid case {code}: negatives differ"));
            }
        }
    }
    // randomized B = 4, 5 with frequent exact ties
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..500 {
        let b = 4 + trial % 2;
        let s = Tensor {
            rows: b,
            cols: b,
            data: (0..b * b)
                .map(|_| (rng.random_range(0..5) as f64) / 4.0)
                .collect(),
        };
        let got = mine_hard_negatives(&s).map_err(|e| e.to_string())?;
        if got != brute_negatives(&s) {
            return Err(format!("random trial {trial}: negatives differ"));
        }
    }
    // pair-count invariant: the matching loss accepts exactly 3B pairs with
    // B positives and rejects everything else
    let ok = Tensor::zeros(6, 1);
    itm_value(&ok, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0])?;
    if itm_value(&Tensor::zeros(5, 1), &[1.0, 0.0, 0.0, 0.0, 0.0]).is_ok() {
        return Err("a 5-pair batch was accepted (not 3B)".into());
    }
    if itm_value(&ok, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).is_ok() {
        return Err("3 positives in a B=2 batch were accepted".into());
    }
    Ok(())
}

#[test]
fn criterion_04_itm_construction() {
    report(4, "3B pair layout and brute-force hard negatives", check_itm_construction());
}

// ---------------------------------------------------------------- criterion 5

fn analytic_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let mut g = Graph::new();
    let pred = g.leaf(Tensor::from_rows(&[a.to_vec()]));
    let one_minus = g.one_minus_iou_rows(pred, Tensor::from_rows(&[b.to_vec()]));
    1.0 - g.value(one_minus).data[0]
}

fn grid_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inside = |bx: [f64; 4], x: f64, y: f64| {
        (x - bx[0]).abs() <= bx[2] / 2.0 && (y - bx[1]).abs() <= bx[3] / 2.0
    };
    let (mut inter, mut union) = (0u64, 0u64);
    let n = 1000;
    for iy in 0..n {
        let y = (iy as f64 + 0.5) / n as f64;
        for ix in 0..n {
            let x = (ix as f64 + 0.5) / n as f64;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_iou_oracle() -> Result<(), String> {
    let worked = analytic_iou([0.5, 0.5, 0.4, 0.4], [0.6, 0.5, 0.4, 0.4]);
    if (worked - 0.6).abs() > 1e-12 {
        return Err(format!("worked example produced {worked}, expected 0.6"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // edges are multiples of the grid resolution, so the cell-center count
    // is exact and the 2e-3 tolerance only absorbs float rounding
    let boxes = |rng: &mut ChaCha8Rng| -> [f64; 4] {
        let mut span = |max: i64| {
            let a = rng.random_range(0..max - 50);
            let b = rng.random_range(a + 50..=max);
            (a, b)
        };
        let (x1, x2) = span(1000);
        let (y1, y2) = span(1000);
        [
            (x1 + x2) as f64 / 2000.0,
            (y1 + y2) as f64 / 2000.0,
            (x2 - x1) as f64 / 1000.0,
            (y2 - y1) as f64 / 1000.0,
        ]
    };
    for trial in 0..500 {
        let (a, b) = (boxes(&mut rng), boxes(&mut rng));
        let exact = analytic_iou(a, b);
        let approx = grid_iou(a, b);
        if (exact - approx).abs() > 2e-3 {
            return Err(format!(
                "trial {trial}: analytic {exact:.6} vs grid {approx:.6} for {a:?} {b:?}"
            ));
        }
    }
    Ok(())
}

#[test]
fn criterion_05_iou_grid_oracle() {
    report(5, "analytic IoU vs grid rasterization", check_iou_oracle());
}

// ---------------------------------------------------------------- criterion 6

fn check_retrieval_metrics() -> Result<(), String> {
    // hand case: true matches at ranks 1 and 3
    let ranking = vec![10usize, 11, 12, 13];
    let truth: BTreeSet<usize> = [10, 12].into_iter().collect();
    let ap = average_precision(&ranking, &truth).map_err(|e| e.to_string())?;
    if (ap - 5.0 / 6.0).abs() > 1e-12 {
        return Err(format!("ranks {{1,3}} AP {ap} != 5/6"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for trial in 0..300 {
        let gallery_n = rng.random_range(2..=20usize);
        let queries = rng.random_range(1..=10usize);
        let dim = 3;
        let gallery: Vec<(usize, Vec<f64>)> = (0..gallery_n)
            .map(|id| {
                (
                    id,
                    // coarse values force distance ties regularly
                    (0..dim).map(|_| (rng.random_range(0..4) as f64) / 3.0).collect(),
                )
            })
            .collect();
        for _ in 0..queries {
            let q: Vec<f64> = (0..dim).map(|_| (rng.random_range(0..4) as f64) / 3.0).collect();
            let ranking = rank_gallery(&q, &gallery).map_err(|e| e.to_string())?;
            // exhaustive oracle: stable sort on (distance, id)
            let mut oracle: Vec<(f64, usize)> = gallery
                .iter()
                .map(|(id, v)| {
                    let d: f64 = q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, *id)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let oracle_ids: Vec<usize> = oracle.iter().map(|&(_, id)| id).collect();
            if ranking != oracle_ids {
                return Err(format!("trial {trial}: ranking differs from oracle"));
            }
            let n_true = rng.random_range(1..=gallery_n.min(4));
            let truth: BTreeSet<usize> = (0..n_true).map(|_| rng.random_range(0..gallery_n)).collect();
            for k in [1usize, 5, 10] {
                let got = recall_at_k(std::slice::from_ref(&ranking), std::slice::from_ref(&truth), k)
                    .map_err(|e| e.to_string())?;
                let want = if ranking.iter().take(k).any(|id| truth.contains(id)) {
                    100.0
                } else {
                    0.0
                };
                if got != want {
                    return Err(format!("trial {trial}: R@{k} mismatch"));
                }
            }
            let got = average_precision(&ranking, &truth).map_err(|e| e.to_string())?;
            let mut hits = 0usize;
            let mut acc = 0.0;
            for (pos, id) in ranking.iter().enumerate() {
                if truth.contains(id) {
                    hits += 1;
                    acc += hits as f64 / (pos + 1) as f64;
                }
            }
            let want = acc / truth.len() as f64;
            if (got - want).abs() > 1e-15 {
                return Err(format!("trial {trial}: AP {got} vs oracle {want}"));
            }
        }
    }
    Ok(())
}

#[test]
fn criterion_06_retrieval_metric_oracle() {
    report(6, "recall@K and AP vs exhaustive oracle", check_retrieval_metrics());
}

// -------------------------------------------------------- criteria 7, 8, 10

fn tuned_encoder_json() -> &'static str {
    r#"{"image_size": 64, "patch_size": 8, "embed_dim": 64, "visual_hidden": 128,
        "vocab_buckets": 4096, "text_embed": 48, "joint_hidden": 64, "joint_dim": 32}"#
}

fn overfit_config(root: &std::path::Path) -> Result<ExperimentConfig, String> {
    let json = format!(
        r#"{{
          "name": "overfit",
          "data_root": {root:?},
          "output_root": {root:?},
          "seed": 7,
          "locations": 16,
          "test_locations": 3,
          "drones_per_location": 4,
          "eval": {{"split": "train"}},
          "train": {{
            "base_lr": 0.3, "grad_clip": 15.0, "max_steps": 200, "batch_size": 32,
            "fusion": "dynamic", "cot": "6",
            "encoder": {}
          }}
        }}"#,
        tuned_encoder_json(),
        root = root.join("data")
    );
    serde_json::from_str(&json).map_err(|e| e.to_string())
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<(), String> {
    prepare(cfg, false).map_err(|e| e.to_string())?;
    synthesize_weather(cfg).map_err(|e| e.to_string())?;
    generate_captions(cfg, 6).map_err(|e| e.to_string())?;
    Ok(())
}

fn check_overfit() -> Result<(), String> {
    let started = Instant::now();
    let root = fresh_dir("overfit");
    let cfg = overfit_config(&root)?;
    build_dataset(&cfg)?;
    let outcome = run_train(&cfg, &root.join("run"), None).map_err(|e| e.to_string())?;
    let report = run_evaluate(&cfg, &outcome.final_checkpoint, Direction::D2s, None)
        .map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    if report.mean.r1 < 95.0 {
        return Err(format!("train-split D2S R@1 {:.2}% < 95%", report.mean.r1));
    }
    if secs >= 300.0 {
        return Err(format!("overfit run took {secs:.0}s (budget 300s)"));
    }
    println!("  mean train D2S R@1 {:.2}% in {secs:.0}s", report.mean.r1);
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}

#[test]
fn criterion_07_overfit_sanity() {
    report(7, "16-location overfit reaches 95% train R@1", check_overfit());
}

fn ablation_config(root: &std::path::Path, seed: u64, fusion: &str, cot: &str) -> Result<ExperimentConfig, String> {
    let json = format!(
        r#"{{
          "name": "ablate",
          "data_root": {root:?},
          "output_root": {root:?},
          "seed": {seed},
          "locations": 16,
          "test_locations": 12,
          "drones_per_location": 4,
          "eval": {{"split": "test"}},
          "train": {{
            "base_lr": 0.3, "grad_clip": 15.0, "max_steps": 200, "batch_size": 32,
            "fusion": "{fusion}", "cot": "{cot}", "freeze_encoders": true,
            "encoder": {}
          }}
        }}"#,
        tuned_encoder_json(),
        root = root.join("data")
    );
    serde_json::from_str(&json).map_err(|e| e.to_string())
}

fn mean_test_ap(root: &std::path::Path, fusion: &str, cot: &str) -> Result<f64, String> {
    let mut total = 0.0;
    for seed in [7u64, 8, 9] {
        let cfg = ablation_config(root, seed, fusion, cot)?;
        let out = root.join(format!("run_{fusion}_{cot}_{seed}"));
        let outcome = run_train(&cfg, &out, None).map_err(|e| e.to_string())?;
        let report = run_evaluate(&cfg, &outcome.final_checkpoint, Direction::D2s, None)
            .map_err(|e| e.to_string())?;
        total += report.mean.ap;
    }
    Ok(total / 3.0)
}

fn check_ablation_direction() -> Result<(), String> {
    let root = fresh_dir("ablate");
    // data generation is seed-independent across cells: one shared toy world,
    // three training seeds per cell
    let cfg = ablation_config(&root, 7, "dynamic", "6")?;
    build_dataset(&cfg)?;
    let dynamic = mean_test_ap(&root, "dynamic", "6")?;
    let static_g = mean_test_ap(&root, "static", "6")?;
    let no_text = mean_test_ap(&root, "dynamic", "nan")?;
    println!("  mean test AP: dynamic {dynamic:.2}, static {static_g:.2}, no-text {no_text:.2}");
    if dynamic < static_g + 1.0 {
        return Err(format!(
            "dynamic gate {dynamic:.2} is not >= static {static_g:.2} + 1"
        ));
    }
    if dynamic < no_text + 1.0 {
        return Err(format!(
            "6-step captions {dynamic:.2} are not >= no-text {no_text:.2} + 1"
        ));
    }
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}

#[test]
fn criterion_08_ablation_direction() {
    report(8, "dynamic>static and 6-step>no-text by 1 AP over 3 seeds", check_ablation_direction());
}

// ---------------------------------------------------------------- criterion 9

fn check_lr_schedule() -> Result<(), String> {
    let cfg = TrainConfig {
        base_lr: 0.04,
        ..TrainConfig::default()
    };
    for epoch in 0..210usize {
        let got = lr_at(&cfg, epoch).map_err(|e| e.to_string())?;
        let want = if epoch < 120 {
            0.04
        } else if epoch < 180 {
            0.004
        } else {
            0.0004
        };
        if got != want {
            return Err(format!("epoch {epoch}: lr {got} != {want}"));
        }
    }
    if lr_at(&cfg, 210).is_ok() {
        return Err("epoch 210 is outside the schedule but was accepted".into());
    }
    Ok(())
}

#[test]
fn criterion_09_lr_schedule() {
    report(9, "piecewise lr schedule over [0,120)/[120,180)/[180,210)", check_lr_schedule());
}

// --------------------------------------------------------------- criterion 10

fn pipeline_once(tag: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let root = fresh_dir(tag);
    let json = format!(
        r#"{{
          "name": "determinism",
          "data_root": {root:?},
          "output_root": {root:?},
          "seed": 11,
          "locations": 6,
          "test_locations": 2,
          "drones_per_location": 2,
          "eval": {{"split": "test"}},
          "train": {{"base_lr": 0.05, "max_steps": 12, "batch_size": 4, "cot": "6"}}
        }}"#,
        root = root.join("data")
    );
    let cfg: ExperimentConfig = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    build_dataset(&cfg)?;
    let outcome = run_train(&cfg, &root.join("run"), None).map_err(|e| e.to_string())?;
    let report_path = root.join("run").join("report_d2s.json");
    run_evaluate(&cfg, &outcome.final_checkpoint, Direction::D2s, Some(&report_path))
        .map_err(|e| e.to_string())?;
    let ckpt = std::fs::read(&outcome.final_checkpoint).map_err(|e| e.to_string())?;
    let report = std::fs::read(&report_path).map_err(|e| e.to_string())?;
    std::fs::remove_dir_all(&root).ok();
    Ok((ckpt, report))
}

fn check_determinism() -> Result<(), String> {
    let (ckpt_a, report_a) = pipeline_once("determinism-a")?;
    let (ckpt_b, report_b) = pipeline_once("determinism-b")?;
    if ckpt_a != ckpt_b {
        return Err("final checkpoints differ between identical runs".into());
    }
    if report_a != report_b {
        return Err("evaluation reports differ between identical runs".into());
    }
    Ok(())
}

#[test]
fn criterion_10_pipeline_determinism() {
    report(10, "two identical pipeline runs are byte-identical", check_determinism());
}

// --------------------------------------------------------------- criterion 11

fn scripted_record(answers: Vec<String>) -> Result<crossview::captions::CaptionRecord, String> {
    let cot = CotConfig::new(6, 3).map_err(|e| e.to_string())?;
    let lexicons = ValidationLexicons::default();
    let image = ImageTensor::filled(16, 16, [0.3, 0.3, 0.3]);
    let region = |cx: f64, label: &str| GroundTruthRegion {
        cx,
        cy: 0.5,
        w: 0.2,
        h: 0.2,
        label_text: label.into(),
    };
    let regions = vec![
        region(0.3, "red block"),
        region(0.5, "blue block"),
        region(0.7, "white strip"),
    ];
    let client = ScriptedClient::new(answers);
    generate_caption_record(&image, &regions, &client, &cot, &lexicons, 0, "scripted/img.png")
        .map_err(|e| e.to_string())
}

fn check_caption_validation() -> Result<(), String> {
    let valid = "visibility is low in fog. dense fog diffusion everywhere. weather: fog";
    let invalid = "visibility is possibly low, uncertain fog diffusion, weather: fog";

    let rec = scripted_record(vec![valid.into()])?;
    if rec.status != CaptionStatus::Accepted || rec.attempts != 1 {
        return Err(format!(
            "valid-first: status {:?}, attempts {} (want accepted after 1)",
            rec.status, rec.attempts
        ));
    }
    if rec.region_hints.len() != 3 || rec.region_boxes.len() != 3 {
        return Err("accepted record must carry exactly 3 hint/box pairs".into());
    }

    let rec = scripted_record(vec![invalid.into(), invalid.into(), valid.into()])?;
    if rec.status != CaptionStatus::Accepted || rec.attempts != 3 {
        return Err(format!(
            "invalid-then-valid: status {:?}, attempts {} (want accepted after 3)",
            rec.status, rec.attempts
        ));
    }

    let rec = scripted_record(vec![invalid.into(), invalid.into(), invalid.into()])?;
    if rec.status != CaptionStatus::RejectedExhausted || rec.attempts != 3 {
        return Err(format!(
            "always-invalid: status {:?}, attempts {} (want rejected_exhausted after 3)",
            rec.status, rec.attempts
        ));
    }
    Ok(())
}

#[test]
fn criterion_11_caption_validation() {
    report(11, "scripted caption retry statuses and attempt counts", check_caption_validation());
}

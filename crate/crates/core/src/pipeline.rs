//! End-to-end pipeline stages shared by the CLI binary and the integration
//! tests: dataset preparation, weather synthesis, caption generation,
//! training, evaluation, ablation sweeps, and report rendering.

use crate::captions::{
    append_records, generate_caption_record, CotConfig, MockLvlmClient, ValidationLexicons,
};
use crate::config::ExperimentConfig;
use crate::dataset::{
    generate_toy_world, mix_seed, render_views, scan_dataset, write_toy_tree, ToyWorld, ViewKind,
};
use crate::error::{CvError, Result};
use crate::eval::{evaluate, Direction, RetrievalReport};
use crate::fusion::FusionMode;
use crate::imagetensor::ImageTensor;
use crate::model::{fingerprint, Checkpoint};
use crate::trainer::{
    captions_file, load_train_data, train, weather_variant_rel, CotMode, TrainOutcome,
};
use crate::weather::{apply_weather, condition_phrase, condition_suite};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const SPLITS: [&str; 2] = ["train", "test"];

fn world_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("world_{split}.json"))
}

fn prepare_fingerprint(cfg: &ExperimentConfig) -> String {
    fingerprint(
        format!(
            "seed={} locations={} test_locations={} drones={}",
            cfg.seed, cfg.locations, cfg.test_locations, cfg.drones_per_location
        )
        .as_bytes(),
    )
}

/// Generates both toy-world splits and renders them to disk. Idempotent: a
/// second call with the same parameters is a no-op; a mismatching existing
/// tree is refused unless `force` is set.
pub fn prepare(cfg: &ExperimentConfig, force: bool) -> Result<bool> {
    let root = &cfg.data_root;
    let fp_path = root.join("prepare.fp");
    let fp = prepare_fingerprint(cfg);
    if root.exists() {
        match std::fs::read_to_string(&fp_path) {
            Ok(existing) if existing.trim() == fp && !force => return Ok(false),
            _ if !force => {
                return Err(CvError::Structure(format!(
                    "data root {} already exists and does not match this configuration; \
                     pass --force to rebuild",
                    root.display()
                )));
            }
            _ => {
                std::fs::remove_dir_all(root).map_err(|e| CvError::io(root, e))?;
            }
        }
    }
    std::fs::create_dir_all(root).map_err(|e| CvError::io(root, e))?;
    for (split, n) in [("train", cfg.locations), ("test", cfg.test_locations)] {
        let world = generate_toy_world(cfg.world_seed(split), n, cfg.drones_per_location)?;
        world.save(&world_path(root, split))?;
        write_toy_tree(&world, root, split)?;
    }
    std::fs::write(&fp_path, &fp).map_err(|e| CvError::io(&fp_path, e))?;
    Ok(true)
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Renders every drone image under all 10 weather conditions into
/// `<root>/weather/<split>/<condition>/<location>/<file>`.
pub fn synthesize_weather(cfg: &ExperimentConfig) -> Result<usize> {
    let root = &cfg.data_root;
    let suite = condition_suite();
    let mut written = 0;
    for split in SPLITS {
        let index = scan_dataset(root, split)?;
        for entry in index.entries.iter().filter(|e| e.view_kind == ViewKind::Drone) {
            let file = entry
                .image_ref
                .file_name()
                .and_then(|f| f.to_str())
                .ok_or_else(|| {
                    CvError::Structure(format!("bad path {}", entry.image_ref.display()))
                })?;
            let image = ImageTensor::load_png(&entry.image_ref)?;
            for (name, spec) in &suite {
                let rel = weather_variant_rel(split, name, entry.location_id, file);
                let seed = mix_seed(cfg.weather_seed(), fnv64(&rel));
                let out = apply_weather(&image, &spec.reseeded(seed))?;
                let path = root.join(&rel);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| CvError::io(dir, e))?;
                }
                out.save_png(&path)?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// Runs the mock captioner over every satellite image and every drone
/// weather variant, writing one JSONL file per prompt depth.
pub fn generate_captions(cfg: &ExperimentConfig, steps: u8) -> Result<PathBuf> {
    let root = &cfg.data_root;
    let cot = CotConfig::new(steps, cfg.captions.max_retries)?;
    let lexicons = ValidationLexicons::default();
    let suite = condition_suite();
    let out_path = captions_file(root, steps);
    if out_path.exists() {
        std::fs::remove_file(&out_path).map_err(|e| CvError::io(&out_path, e))?;
    }
    let mut records = Vec::new();
    for split in SPLITS {
        let world = ToyWorld::load(&world_path(root, split))?;
        for scene in &world.locations {
            let loc = scene.location_id;
            // Satellite: canonical view, clear weather.
            let (sat_img, sat_regions) = render_views(scene, ViewKind::Satellite, 0);
            let client = MockLvlmClient::new(scene.facts.clone(), "clear");
            let rel = format!(
                "{split}/{}/{loc:04}/sat_0000.png",
                ViewKind::Satellite.dir_name()
            );
            records.push(generate_caption_record(
                &sat_img,
                &sat_regions,
                &client,
                &cot,
                &lexicons,
                loc,
                &rel,
            )?);
            // Drone variants: regions follow the view transform, the
            // weather phrase follows the synthesized condition.
            for i in 0..world.drones_per_location {
                let jitter = crate::dataset::drone_jitter_seed(world.seed, loc, i);
                let (drone_img, drone_regions) = render_views(scene, ViewKind::Drone, jitter);
                for (name, spec) in &suite {
                    let rel =
                        weather_variant_rel(split, name, loc, &format!("drone_{i:04}.png"));
                    let client =
                        MockLvlmClient::new(scene.facts.clone(), condition_phrase(spec));
                    records.push(generate_caption_record(
                        &drone_img,
                        &drone_regions,
                        &client,
                        &cot,
                        &lexicons,
                        loc,
                        &rel,
                    )?);
                }
            }
        }
    }
    append_records(&out_path, &records)?;
    Ok(out_path)
}

/// Generates the captions file for the given depth if it is not on disk yet.
pub fn ensure_captions(cfg: &ExperimentConfig, cot: CotMode) -> Result<()> {
    if let CotMode::Steps(k) = cot {
        if !captions_file(&cfg.data_root, k).exists() {
            generate_captions(cfg, k)?;
        }
    }
    Ok(())
}

pub fn run_train(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let tc = cfg.effective_train();
    ensure_captions(cfg, tc.cot)?;
    let data = load_train_data(&cfg.data_root, "train", tc.cot)?;
    train(&tc, &data, out_dir, resume)
}

pub fn run_evaluate(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    direction: Direction,
    out_file: Option<&Path>,
) -> Result<RetrievalReport> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let cot = cfg.train.cot;
    ensure_captions(cfg, cot)?;
    let data = load_train_data(&cfg.data_root, &cfg.eval.split, cot)?;
    let report = evaluate(
        &checkpoint.model,
        &data,
        direction,
        cfg.eval.satellite_text,
        cot.uses_text(),
    )?;
    if let Some(path) = out_file {
        report.save(path)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Fusion,
    Cot,
}

impl Sweep {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Sweep::Fusion),
            "cot" => Ok(Sweep::Cot),
            other => Err(CvError::Config(format!(
                "unknown sweep '{other}' (expected fusion|cot)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: String,
    /// Mean AP of the D2S report per seed, in seed order.
    pub per_seed_ap: Vec<f64>,
    pub mean_ap: f64,
    pub mean_r1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sweep: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>10}   per-seed AP\n",
            format!("[{}]", self.sweep),
            "mean AP",
            "mean R@1"
        );
        for c in &self.cells {
            let seeds = c
                .per_seed_ap
                .iter()
                .map(|v| format!("{v:.2}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "{:<10} {:>10.2} {:>10.2}   {}\n",
                c.row, c.mean_ap, c.mean_r1, seeds
            ));
        }
        out
    }
}

/// Trains one run per (row, seed) cell and aggregates test-set D2S metrics.
pub fn run_ablate(
    cfg: &ExperimentConfig,
    sweep: Sweep,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(CvError::invalid("ablation needs at least one seed"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CvError::io(out_dir, e))?;
    let rows: Vec<(String, FusionMode, CotMode)> = match sweep {
        Sweep::Fusion => ["concat", "static", "dynamic"]
            .iter()
            .map(|&m| {
                FusionMode::parse(m).map(|f| (m.to_string(), f, CotMode::Steps(6)))
            })
            .collect::<Result<_>>()?,
        Sweep::Cot => ["nan", "0", "2", "4", "6"]
            .iter()
            .map(|&m| {
                CotMode::parse(m).map(|c| (m.to_string(), FusionMode::DynamicGate, c))
            })
            .collect::<Result<_>>()?,
    };

    let mut cells = Vec::new();
    for (row, fusion, cot) in rows {
        let mut per_seed_ap = Vec::with_capacity(seeds.len());
        let mut per_seed_r1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cell_cfg = cfg.clone();
            cell_cfg.seed = seed;
            cell_cfg.train.fusion = fusion;
            cell_cfg.train.cot = cot;
            let cell_dir = out_dir.join(format!("{row}_seed{seed}"));
            let outcome = run_train(&cell_cfg, &cell_dir, None).map_err(|e| {
                CvError::TrainStep(format!("ablation cell {row}/seed {seed} failed: {e}"))
            })?;
            let report = run_evaluate(
                &cell_cfg,
                &outcome.final_checkpoint,
                Direction::D2s,
                Some(&cell_dir.join("report_d2s.json")),
            )
            .map_err(|e| {
                CvError::TrainStep(format!("ablation cell {row}/seed {seed} failed: {e}"))
            })?;
            per_seed_ap.push(report.mean.ap);
            per_seed_r1.push(report.mean.r1);
        }
        let mean_ap = per_seed_ap.iter().sum::<f64>() / seeds.len() as f64;
        let mean_r1 = per_seed_r1.iter().sum::<f64>() / seeds.len() as f64;
        cells.push(AblationCell {
            row,
            per_seed_ap,
            mean_ap,
            mean_r1,
        });
    }
    let table = AblationTable {
        sweep: match sweep {
            Sweep::Fusion => "fusion".to_string(),
            Sweep::Cot => "cot".to_string(),
        },
        seeds: seeds.to_vec(),
        cells,
    };
    let path = out_dir.join("ablation.json");
    let body = serde_json::to_string_pretty(&table).map_err(|e| CvError::serde(&path, e))?;
    std::fs::write(&path, body + "\n").map_err(|e| CvError::io(&path, e))?;
    Ok(table)
}

/// Renders every stored report in a directory; with exactly two reports of
/// the same direction a delta column (second minus first) is appended.
pub fn render_reports(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CvError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let reports: Vec<(PathBuf, RetrievalReport)> = files
        .iter()
        .filter_map(|p| RetrievalReport::load(p).ok().map(|r| (p.clone(), r)))
        .collect();
    if reports.is_empty() {
        return Err(CvError::Structure(format!(
            "no retrieval reports found under {}",
            dir.display()
        )));
    }
    if reports.len() == 2 && reports[0].1.direction == reports[1].1.direction {
        let (pa, a) = &reports[0];
        let (pb, b) = &reports[1];
        return Ok(render_comparison(pa, a, pb, b));
    }
    let mut out = String::new();
    for (path, report) in &reports {
        out.push_str(&format!("# {}\n{}\n", path.display(), report.render_table()));
    }
    Ok(out)
}

fn render_comparison(
    pa: &Path,
    a: &RetrievalReport,
    pb: &Path,
    b: &RetrievalReport,
) -> String {
    let mut out = format!(
        "# {} vs {}\n{:<12} {:>8} {:>8} {:>8}\n",
        pa.display(),
        pb.display(),
        format!("[{}]", a.direction.label()),
        "AP(a)",
        "AP(b)",
        "delta"
    );
    let rows_a = a.rows.iter().chain(std::iter::once(&a.mean));
    let rows_b = b.rows.iter().chain(std::iter::once(&b.mean));
    for (ra, rb) in rows_a.zip(rows_b) {
        out.push_str(&format!(
            "{:<12} {:>8.2} {:>8.2} {:>+8.2}\n",
            ra.condition,
            ra.ap,
            rb.ap,
            rb.ap - ra.ap
        ));
    }
    out
}

//! Dataset ingestion and the procedural toy world.
//!
//! The toy world stands in for benchmark imagery: each location is a flat
//! scene of colored primitives with exact region and fact ground truth, so
//! every loss and the caption mock have verifiable targets.

use crate::error::{CvError, Result};
use crate::imagetensor::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const DEFAULT_RENDER_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Drone,
    Satellite,
}

impl ViewKind {
    pub fn dir_name(&self) -> &'static str {
        match self {
            ViewKind::Drone => "drone",
            ViewKind::Satellite => "satellite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub location_id: usize,
    pub view_kind: ViewKind,
    pub image_ref: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
    pub num_locations: usize,
}

impl DatasetIndex {
    pub fn entries_for(&self, location_id: usize, view: ViewKind) -> Vec<&DatasetEntry> {
        self.entries
            .iter()
            .filter(|e| e.location_id == location_id && e.view_kind == view)
            .collect()
    }
}

/// Normalized center-size box with a naming phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRegion {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub label_text: String,
}

impl GroundTruthRegion {
    pub fn is_valid(&self) -> bool {
        let eps = 1e-6;
        self.w > 0.0
            && self.h > 0.0
            && self.cx - self.w / 2.0 >= -eps
            && self.cx + self.w / 2.0 <= 1.0 + eps
            && self.cy - self.h / 2.0 >= -eps
            && self.cy + self.h / 2.0 <= 1.0 + eps
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Block,
    Strip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub color: [f64; 3],
    pub color_name: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl SceneObject {
    pub fn label_text(&self) -> String {
        let shape = match self.shape {
            ObjectShape::Block => "block",
            ObjectShape::Strip => "strip",
        };
        format!("{} {}", self.color_name, shape)
    }
}

/// Templated facts the mock captioner builds its answers from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFacts {
    pub object_count: usize,
    pub block_count: usize,
    pub strip_count: usize,
    pub dominant_color: String,
    pub layout: String,
    pub color_names: Vec<String>,
    /// One short "color shape quadrant" phrase per object; the densest
    /// location-identifying payload the mock captioner can surface.
    pub placements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub location_id: usize,
    pub background: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub facts: SceneFacts,
}

impl ToyScene {
    /// Ground-truth regions in canonical (satellite) coordinates.
    /// Only blocks carry regions; strips are texture.
    pub fn regions(&self) -> Vec<GroundTruthRegion> {
        self.objects
            .iter()
            .filter(|o| o.shape == ObjectShape::Block)
            .map(|o| GroundTruthRegion {
                cx: o.cx,
                cy: o.cy,
                w: o.w,
                h: o.h,
                label_text: o.label_text(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub seed: u64,
    pub drones_per_location: usize,
    pub locations: Vec<ToyScene>,
}

const PALETTE: [([f64; 3], &str); 8] = [
    ([0.82, 0.15, 0.12], "red"),
    ([0.15, 0.30, 0.80], "blue"),
    ([0.90, 0.80, 0.15], "yellow"),
    ([0.55, 0.20, 0.70], "purple"),
    ([0.90, 0.50, 0.10], "orange"),
    ([0.15, 0.75, 0.75], "cyan"),
    ([0.92, 0.92, 0.90], "white"),
    ([0.12, 0.12, 0.15], "charcoal"),
];

pub fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix-style fan-out of one seed into per-component streams
    let mut z = a ^ b.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn generate_toy_world(
    seed: u64,
    num_locations: usize,
    drones_per_location: usize,
) -> Result<ToyWorld> {
    if num_locations == 0 || drones_per_location == 0 {
        return Err(CvError::invalid(
            "num_locations and drones_per_location must be >= 1",
        ));
    }
    let locations = (0..num_locations)
        .map(|loc| generate_scene(mix_seed(seed, loc as u64), loc))
        .collect();
    Ok(ToyWorld {
        seed,
        drones_per_location,
        locations,
    })
}

fn generate_scene(scene_seed: u64, location_id: usize) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let bg_base = 0.28 + rng.random::<f64>() * 0.12;
    let background = [
        bg_base * 0.8,
        bg_base + rng.random::<f64>() * 0.08,
        bg_base * 0.7,
    ];
    let block_count = rng.random_range(3..=5usize);
    let strip_count = rng.random_range(1..=2usize);
    let mut objects = Vec::new();
    for i in 0..block_count + strip_count {
        let shape = if i < block_count {
            ObjectShape::Block
        } else {
            ObjectShape::Strip
        };
        let (color, color_name) = PALETTE[rng.random_range(0..PALETTE.len())];
        let (w, h) = match shape {
            ObjectShape::Block => (
                0.12 + rng.random::<f64>() * 0.16,
                0.12 + rng.random::<f64>() * 0.16,
            ),
            // long and thin, road-like
            ObjectShape::Strip => (0.5 + rng.random::<f64>() * 0.3, 0.03),
        };
        // keep a jitter margin so drone offsets rarely clip boxes
        let mx = (w / 2.0 + 0.08).min(0.45);
        let my = (h / 2.0 + 0.08).min(0.45);
        let cx = mx + rng.random::<f64>() * (1.0 - 2.0 * mx);
        let cy = my + rng.random::<f64>() * (1.0 - 2.0 * my);
        objects.push(SceneObject {
            shape,
            color,
            color_name: color_name.to_string(),
            cx,
            cy,
            w,
            h,
        });
    }
    let facts = build_facts(&objects);
    ToyScene {
        location_id,
        background,
        objects,
        facts,
    }
}

fn build_facts(objects: &[SceneObject]) -> SceneFacts {
    let block_count = objects
        .iter()
        .filter(|o| o.shape == ObjectShape::Block)
        .count();
    let strip_count = objects.len() - block_count;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in objects {
        *counts.entry(o.color_name.as_str()).or_default() += 1;
    }
    // ties resolve to the lexicographically first name via BTreeMap order
    let dominant_color = counts
        .iter()
        .max_by_key(|(_, &c)| c)
        .map(|(n, _)| n.to_string())
        .unwrap_or_default();
    let mut quadrants = [0usize; 4];
    for o in objects {
        let q = (if o.cy >= 0.5 { 2 } else { 0 }) + (if o.cx >= 0.5 { 1 } else { 0 });
        quadrants[q] += 1;
    }
    let names = ["north-west", "north-east", "south-west", "south-east"];
    let busiest = (0..4).max_by_key(|&q| quadrants[q]).unwrap();
    let cells = [
        ["north-west", "north", "north-east"],
        ["west", "center", "east"],
        ["south-west", "south", "south-east"],
    ];
    let placements = objects
        .iter()
        .map(|o| {
            let col = ((o.cx * 3.0) as usize).min(2);
            let row = ((o.cy * 3.0) as usize).min(2);
            // single hyphenated token so the bag-of-words encoder sees one
            // distinctive bucket per (color, shape, cell) combination
            format!("{}-{}", o.label_text().replace(' ', "-"), cells[row][col])
        })
        .collect();
    SceneFacts {
        object_count: objects.len(),
        block_count,
        strip_count,
        dominant_color,
        layout: format!("most structures in the {}", names[busiest]),
        color_names: objects.iter().map(|o| o.color_name.clone()).collect(),
        placements,
    }
}

/// Quarter-turn rotation plus offset; identity when k=0 and offsets are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub quarter_turns: u8,
    pub dx: f64,
    pub dy: f64,
    pub brightness: f64,
}

impl ViewTransform {
    pub fn identity() -> Self {
        ViewTransform {
            quarter_turns: 0,
            dx: 0.0,
            dy: 0.0,
            brightness: 1.0,
        }
    }

    fn point(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut px, mut py) = (x, y);
        for _ in 0..self.quarter_turns % 4 {
            let (nx, ny) = (1.0 - py, px);
            px = nx;
            py = ny;
        }
        (px + self.dx, py + self.dy)
    }

    pub fn region(&self, r: &GroundTruthRegion) -> GroundTruthRegion {
        if self.quarter_turns % 4 == 0 && self.dx == 0.0 && self.dy == 0.0 && r.is_valid() {
            return r.clone();
        }
        let (cx, cy) = self.point(r.cx, r.cy);
        let (w, h) = if self.quarter_turns % 2 == 1 {
            (r.h, r.w)
        } else {
            (r.w, r.h)
        };
        // clamp corners back to the unit square, preserving a minimum size
        let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
        let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
        let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
        let w = (x2 - x1).max(1e-3);
        let h = (y2 - y1).max(1e-3);
        GroundTruthRegion {
            cx: ((x1 + x2) / 2.0).clamp(w / 2.0, 1.0 - w / 2.0),
            cy: ((y1 + y2) / 2.0).clamp(h / 2.0, 1.0 - h / 2.0),
            w,
            h,
            label_text: r.label_text.clone(),
        }
    }
}

fn drone_transform(scene: &ToyScene, jitter_seed: u64) -> ViewTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(jitter_seed, scene.location_id as u64));
    ViewTransform {
        quarter_turns: rng.random_range(0..4u8),
        dx: (rng.random::<f64>() - 0.5) * 0.1,
        dy: (rng.random::<f64>() - 0.5) * 0.1,
        brightness: 0.92 + rng.random::<f64>() * 0.16,
    }
}

pub fn render_views(
    scene: &ToyScene,
    view_kind: ViewKind,
    jitter_seed: u64,
) -> (ImageTensor, Vec<GroundTruthRegion>) {
    let transform = match view_kind {
        ViewKind::Satellite => ViewTransform::identity(),
        ViewKind::Drone => drone_transform(scene, jitter_seed),
    };
    render_with_transform(scene, &transform, DEFAULT_RENDER_SIZE)
}

pub fn render_with_transform(
    scene: &ToyScene,
    transform: &ViewTransform,
    size: usize,
) -> (ImageTensor, Vec<GroundTruthRegion>) {
    let mut img = ImageTensor::filled(size, size, scene.background);
    for obj in &scene.objects {
        let region = transform.region(&GroundTruthRegion {
            cx: obj.cx,
            cy: obj.cy,
            w: obj.w,
            h: obj.h,
            label_text: String::new(),
        });
        let color = [
            obj.color[0] * transform.brightness,
            obj.color[1] * transform.brightness,
            obj.color[2] * transform.brightness,
        ];
        draw_box(&mut img, &region, color);
    }
    img.clamp_in_place();
    let regions = scene
        .regions()
        .iter()
        .map(|r| transform.region(r))
        .collect();
    (img, regions)
}

fn draw_box(img: &mut ImageTensor, r: &GroundTruthRegion, color: [f64; 3]) {
    let size = img.height as f64;
    let x1 = ((r.cx - r.w / 2.0) * size).floor().max(0.0) as usize;
    let x2 = (((r.cx + r.w / 2.0) * size).ceil() as usize).min(img.width);
    let y1 = ((r.cy - r.h / 2.0) * size).floor().max(0.0) as usize;
    let y2 = (((r.cy + r.h / 2.0) * size).ceil() as usize).min(img.height);
    for y in y1..y2 {
        for x in x1..x2 {
            let px = (x as f64 + 0.5) / size;
            let py = (y as f64 + 0.5) / size;
            if (px - r.cx).abs() <= r.w / 2.0 && (py - r.cy).abs() <= r.h / 2.0 {
                img.set(y, x, color);
            }
        }
    }
}

pub fn scan_dataset(root: &Path, split: &str) -> Result<DatasetIndex> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(CvError::Structure(format!(
            "split directory missing: {}",
            split_dir.display()
        )));
    }
    let mut entries = Vec::new();
    let mut location_ids: Vec<usize> = Vec::new();
    for view in [ViewKind::Satellite, ViewKind::Drone] {
        let view_dir = split_dir.join(view.dir_name());
        if !view_dir.is_dir() {
            return Err(CvError::MissingViewDir { path: view_dir });
        }
        let mut loc_dirs: Vec<PathBuf> = fs::read_dir(&view_dir)
            .map_err(|e| CvError::io(&view_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        loc_dirs.sort();
        for loc_dir in loc_dirs {
            let name = loc_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let location_id: usize = name.parse().map_err(|_| {
                CvError::Structure(format!(
                    "location directory name is not an integer: {}",
                    loc_dir.display()
                ))
            })?;
            let mut files: Vec<PathBuf> = fs::read_dir(&loc_dir)
                .map_err(|e| CvError::io(&loc_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CvError::EmptyLocation { location_id });
            }
            if !location_ids.contains(&location_id) {
                location_ids.push(location_id);
            }
            for f in files {
                entries.push(DatasetEntry {
                    location_id,
                    view_kind: view,
                    image_ref: f,
                });
            }
        }
    }
    location_ids.sort_unstable();
    let num_locations = location_ids.len();
    if num_locations == 0 {
        return Err(CvError::Structure(format!(
            "no locations under {}",
            split_dir.display()
        )));
    }
    if location_ids != (0..num_locations).collect::<Vec<_>>() {
        return Err(CvError::Structure(format!(
            "location ids must be contiguous 0..{num_locations}, got {location_ids:?}"
        )));
    }
    for &loc in &location_ids {
        for view in [ViewKind::Satellite, ViewKind::Drone] {
            if !entries
                .iter()
                .any(|e| e.location_id == loc && e.view_kind == view)
            {
                return Err(CvError::Structure(format!(
                    "location {loc} has no {} entries",
                    view.dir_name()
                )));
            }
        }
    }
    Ok(DatasetIndex {
        entries,
        num_locations,
    })
}

/// One drone image per location, the representative for captioning.
pub fn sample_region_representative(
    index: &DatasetIndex,
    seed: u64,
) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for loc in 0..index.num_locations {
        let mut drones: Vec<&DatasetEntry> = index.entries_for(loc, ViewKind::Drone);
        if drones.is_empty() {
            return Err(CvError::EmptyLocation { location_id: loc });
        }
        drones.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, loc as u64));
        let pick = rng.random_range(0..drones.len());
        out.insert(loc, drones[pick].image_ref.clone());
    }
    Ok(out)
}

impl ToyWorld {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CvError::serde(path, e))?;
        fs::write(path, json).map_err(|e| CvError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ToyWorld> {
        let text = fs::read_to_string(path).map_err(|e| CvError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CvError::serde(path, e))
    }
}

/// Writes a `<split>/<view>/<location>/...` tree of rendered toy images.
/// Drone jitter seeds are derived from (world seed, location, index).
pub fn write_toy_tree(world: &ToyWorld, root: &Path, split: &str) -> Result<()> {
    for scene in &world.locations {
        let sat_dir = root
            .join(split)
            .join(ViewKind::Satellite.dir_name())
            .join(format!("{:04}", scene.location_id));
        fs::create_dir_all(&sat_dir).map_err(|e| CvError::io(&sat_dir, e))?;
        let (img, _) = render_views(scene, ViewKind::Satellite, 0);
        img.save_png(&sat_dir.join("sat_0000.png"))?;
        let drone_dir = root
            .join(split)
            .join(ViewKind::Drone.dir_name())
            .join(format!("{:04}", scene.location_id));
        fs::create_dir_all(&drone_dir).map_err(|e| CvError::io(&drone_dir, e))?;
        for i in 0..world.drones_per_location {
            let jitter = mix_seed(world.seed, (scene.location_id * 1000 + i) as u64);
            let (img, _) = render_views(scene, ViewKind::Drone, jitter);
            img.save_png(&drone_dir.join(format!("drone_{i:04}.png")))?;
        }
    }
    Ok(())
}

/// Jitter seed used for the i-th drone view of a location, shared by the
/// on-disk tree and in-memory batch assembly.
pub fn drone_jitter_seed(world_seed: u64, location_id: usize, drone_index: usize) -> u64 {
    mix_seed(world_seed, (location_id * 1000 + drone_index) as u64)
}

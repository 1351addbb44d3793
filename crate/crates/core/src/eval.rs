//! Retrieval evaluation: Euclidean ranking, Recall@K, multi-match average
//! precision, and per-weather-condition report tables in both directions.

use crate::autodiff::Tensor;
use crate::encoders::patch_feature_batch;
use crate::error::{CvError, Result};
use crate::model::{fused_embeddings, ModelParams};
use crate::trainer::TrainData;
use crate::weather::condition_suite;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    D2s,
    S2d,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d2s" => Ok(Direction::D2s),
            "s2d" => Ok(Direction::S2d),
            other => Err(CvError::Config(format!(
                "unknown direction '{other}' (expected d2s|s2d)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Direction::D2s => "D2S",
            Direction::S2d => "S2D",
        }
    }
}

/// Text fed to the satellite side at evaluation time: captions generated on
/// the clean satellite render, or one fixed neutral sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SatelliteTextMode {
    Generated,
    NeutralConstant,
}

pub const NEUTRAL_SATELLITE_TEXT: &str =
    "weather: clear. an overhead satellite view of the scene.";

/// Gallery ids sorted by ascending Euclidean distance to the query;
/// distance ties break by ascending id.
pub fn rank_gallery(query: &[f64], gallery: &[(usize, Vec<f64>)]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(CvError::invalid("empty gallery"));
    }
    for (_, v) in gallery {
        if v.len() != query.len() {
            return Err(CvError::invalid("gallery/query dimension mismatch"));
        }
    }
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .map(|(id, v)| {
            let d2: f64 = query.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, *id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Percentage of queries whose top-k contains at least one true match.
pub fn recall_at_k(
    rankings: &[Vec<usize>],
    truths: &[BTreeSet<usize>],
    k: usize,
) -> Result<f64> {
    if k < 1 {
        return Err(CvError::invalid("k must be >= 1"));
    }
    if rankings.len() != truths.len() || rankings.is_empty() {
        return Err(CvError::invalid("rankings and truth sets must align"));
    }
    let mut hits = 0usize;
    for (ranking, truth) in rankings.iter().zip(truths) {
        if truth.is_empty() {
            return Err(CvError::invalid("query without any true match"));
        }
        if ranking.iter().take(k).any(|id| truth.contains(id)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Multi-match AP: mean of precision at each true-match rank.
pub fn average_precision(ranking: &[usize], truth: &BTreeSet<usize>) -> Result<f64> {
    if truth.is_empty() {
        return Err(CvError::invalid("query without any true match"));
    }
    let mut found = 0usize;
    let mut acc = 0.0;
    for (pos, id) in ranking.iter().enumerate() {
        if truth.contains(id) {
            found += 1;
            acc += found as f64 / (pos + 1) as f64;
        }
    }
    if found == 0 {
        return Err(CvError::invalid("no true match present in the gallery"));
    }
    Ok(acc / found as f64)
}

pub fn mean_average_precision(
    rankings: &[Vec<usize>],
    truths: &[BTreeSet<usize>],
) -> Result<f64> {
    if rankings.len() != truths.len() || rankings.is_empty() {
        return Err(CvError::invalid("rankings and truth sets must align"));
    }
    let mut acc = 0.0;
    for (r, t) in rankings.iter().zip(truths) {
        acc += average_precision(r, t)?;
    }
    Ok(100.0 * acc / rankings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub rows: Vec<ConditionRow>,
    pub mean: ConditionRow,
}

impl RetrievalReport {
    pub fn from_rows(direction: Direction, rows: Vec<ConditionRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CvError::invalid("report needs at least one condition row"));
        }
        let n = rows.len() as f64;
        let mean = ConditionRow {
            condition: "Mean".to_string(),
            r1: rows.iter().map(|r| r.r1).sum::<f64>() / n,
            r5: rows.iter().map(|r| r.r5).sum::<f64>() / n,
            r10: rows.iter().map(|r| r.r10).sum::<f64>() / n,
            ap: rows.iter().map(|r| r.ap).sum::<f64>() / n,
        };
        Ok(RetrievalReport {
            direction,
            rows,
            mean,
        })
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
            format!("[{}]", self.direction.label()),
            "R@1",
            "R@5",
            "R@10",
            "AP"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                row.condition, row.r1, row.r5, row.r10, row.ap
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body =
            serde_json::to_string_pretty(self).map_err(|e| CvError::serde(path, e))?;
        std::fs::write(path, body + "\n").map_err(|e| CvError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| CvError::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| CvError::serde(path, e))
    }
}

struct Side {
    ids: Vec<usize>,
    labels: Vec<usize>,
    embeddings: Tensor,
}

fn embed_side(
    model: &ModelParams,
    items: &[(usize, usize, &crate::trainer::VariantData, Option<String>)],
    use_text: bool,
) -> Result<Side> {
    let images: Vec<_> = items.iter().map(|(_, _, v, _)| v.image.clone()).collect();
    let patches = patch_feature_batch(&model.config.encoder, &images)?;
    let texts: Option<Vec<String>> = if use_text {
        let mut out = Vec::with_capacity(items.len());
        for (_, _, v, text_override) in items {
            let t = match text_override {
                Some(t) => t.clone(),
                None => v
                    .text
                    .clone()
                    .ok_or_else(|| CvError::MissingCaption("evaluation item".into()))?,
            };
            out.push(t);
        }
        Some(out)
    } else {
        None
    };
    let embeddings = fused_embeddings(model, &patches, texts.as_deref())?;
    Ok(Side {
        ids: items.iter().map(|(id, _, _, _)| *id).collect(),
        labels: items.iter().map(|(_, l, _, _)| *l).collect(),
        embeddings,
    })
}

/// Per-condition retrieval over the prepared corpus. D2S: weather-corrupted
/// drone queries against the clean satellite gallery. S2D: clean satellite
/// queries against the drone gallery rendered under the condition; every
/// drone view of the query's location counts as a true match.
pub fn evaluate(
    model: &ModelParams,
    data: &TrainData,
    direction: Direction,
    satellite_text: SatelliteTextMode,
    use_text: bool,
) -> Result<RetrievalReport> {
    let suite = condition_suite();
    let sat_override = match satellite_text {
        SatelliteTextMode::Generated => None,
        SatelliteTextMode::NeutralConstant => Some(NEUTRAL_SATELLITE_TEXT.to_string()),
    };

    let sats: Vec<_> = data
        .units
        .iter()
        .filter(|u| u.variants.len() == 1)
        .collect();
    let drones: Vec<_> = data
        .units
        .iter()
        .filter(|u| u.variants.len() == suite.len())
        .collect();
    if sats.is_empty() || drones.is_empty() {
        return Err(CvError::invalid("evaluation needs both views present"));
    }

    let sat_items: Vec<_> = sats
        .iter()
        .enumerate()
        .map(|(i, u)| (i, u.label, &u.variants[0], sat_override.clone()))
        .collect();
    let sat_side = embed_side(model, &sat_items, use_text)?;

    let mut rows = Vec::with_capacity(suite.len());
    for (c, (name, _)) in suite.iter().enumerate() {
        let drone_items: Vec<_> = drones
            .iter()
            .enumerate()
            .map(|(i, u)| (i, u.label, &u.variants[c], None))
            .collect();
        let drone_side = embed_side(model, &drone_items, use_text)?;

        let (queries, gallery) = match direction {
            Direction::D2s => (&drone_side, &sat_side),
            Direction::S2d => (&sat_side, &drone_side),
        };
        let gallery_rows: Vec<(usize, Vec<f64>)> = gallery
            .ids
            .iter()
            .map(|&id| (id, gallery.embeddings.row(id).to_vec()))
            .collect();
        let mut rankings = Vec::with_capacity(queries.ids.len());
        let mut truths = Vec::with_capacity(queries.ids.len());
        for (q, &label) in queries.labels.iter().enumerate() {
            rankings.push(rank_gallery(queries.embeddings.row(q), &gallery_rows)?);
            let truth: BTreeSet<usize> = gallery
                .ids
                .iter()
                .filter(|&&id| gallery.labels[id] == label)
                .copied()
                .collect();
            truths.push(truth);
        }
        rows.push(ConditionRow {
            condition: name.clone(),
            r1: recall_at_k(&rankings, &truths, 1)?,
            r5: recall_at_k(&rankings, &truths, 5)?,
            r10: recall_at_k(&rankings, &truths, 10)?,
            ap: mean_average_precision(&rankings, &truths)?,
        });
    }
    RetrievalReport::from_rows(direction, rows)
}

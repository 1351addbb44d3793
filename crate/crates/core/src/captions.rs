//! Staged caption generation: prompt construction, client abstraction,
//! validation with rejection/regeneration, and region-hint extraction.
//!
//! The deterministic mock client templates its answers from toy scene facts
//! so full pipeline runs need no external model; a live endpoint satisfies
//! the same `LvlmClient` contract.

use crate::dataset::{GroundTruthRegion, SceneFacts};
use crate::error::{CvError, Result};
use crate::imagetensor::ImageTensor;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotConfig {
    pub step_count: u8,
    pub max_retries: u32,
}

impl CotConfig {
    pub fn new(step_count: u8, max_retries: u32) -> Result<Self> {
        if ![0, 2, 4, 6].contains(&step_count) {
            return Err(CvError::invalid(format!(
                "step_count must be one of 0, 2, 4, 6; got {step_count}"
            )));
        }
        if max_retries == 0 {
            return Err(CvError::invalid("max_retries must be positive"));
        }
        Ok(CotConfig {
            step_count,
            max_retries,
        })
    }
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig {
            step_count: 6,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptPhase {
    Weather,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptId {
    OneShot,
    WeatherFull,
    WeatherObservation,
    Visibility,
    AtmosphericCues,
    WeatherLabel,
    SpatialFull,
    SpatialLayout,
    MacroLayout,
    StructuralElements,
    TopologicalRelations,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: PromptId,
    pub phase: PromptPhase,
    pub text: String,
}

/// Placeholder substituted with the weather-phase label before the spatial
/// phase runs ("weather-conditioned prior").
pub const WEATHER_PRIOR_SLOT: &str = "{weather_prior}";

pub fn build_prompts(cfg: &CotConfig) -> Result<Vec<Prompt>> {
    let p = |id, phase, text: &str| Prompt {
        id,
        phase,
        text: text.to_string(),
    };
    let prompts = match cfg.step_count {
        0 => vec![p(
            PromptId::OneShot,
            PromptPhase::Weather,
            "Describe this aerial image in one turn: state the visibility, the \
             weather, and the scene layout.",
        )],
        2 => vec![
            p(
                PromptId::WeatherFull,
                PromptPhase::Weather,
                "Assess the weather in this aerial image: quantify global visibility, \
                 point out local atmospheric cues, and finish with a weather label.",
            ),
            p(
                PromptId::SpatialFull,
                PromptPhase::Spatial,
                "Given the weather prior ({weather_prior}), describe the scene: macro \
                 layout, structural elements, and their topological relations.",
            ),
        ],
        4 => vec![
            p(
                PromptId::WeatherObservation,
                PromptPhase::Weather,
                "Quantify the global visibility in this aerial image and point out \
                 local atmospheric cues such as streak reflections or fog diffusion.",
            ),
            p(
                PromptId::WeatherLabel,
                PromptPhase::Weather,
                "Integrating those observations, state a definitive weather label.",
            ),
            p(
                PromptId::SpatialLayout,
                PromptPhase::Spatial,
                "Given the weather prior ({weather_prior}), scan the scene layout and \
                 enumerate its structural elements with counts and shapes.",
            ),
            p(
                PromptId::TopologicalRelations,
                PromptPhase::Spatial,
                "Synthesize the relative positions and topological relations of those \
                 elements.",
            ),
        ],
        6 => vec![
            p(
                PromptId::Visibility,
                PromptPhase::Weather,
                "Quantify the global visibility in this aerial image: how far can \
                 structures be distinguished?",
            ),
            p(
                PromptId::AtmosphericCues,
                PromptPhase::Weather,
                "Identify local atmospheric cues, e.g. rain-streak reflections, fog \
                 diffusion, flake occlusion, glare, or motion smear.",
            ),
            p(
                PromptId::WeatherLabel,
                PromptPhase::Weather,
                "Integrating global and local evidence, state a definitive weather \
                 label.",
            ),
            p(
                PromptId::MacroLayout,
                PromptPhase::Spatial,
                "Given the weather prior ({weather_prior}), describe the macro layout: \
                 distribution of structures and open areas.",
            ),
            p(
                PromptId::StructuralElements,
                PromptPhase::Spatial,
                "Enumerate the structural elements: counts, shapes, and colors.",
            ),
            p(
                PromptId::TopologicalRelations,
                PromptPhase::Spatial,
                "Synthesize relative positions and topological relations among the \
                 elements.",
            ),
        ],
        other => {
            return Err(CvError::invalid(format!(
                "unsupported step_count {other}"
            )))
        }
    };
    Ok(prompts)
}

/// Answers one text per prompt, in order. Implementations must be pure in
/// (image, prompt list) up to their own scripted state.
pub trait LvlmClient {
    fn answer(&self, image: &ImageTensor, prompts: &[Prompt]) -> Vec<String>;
}

/// Word lists used by caption validation. Config-owned; defaults shipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLexicons {
    pub uncertainty: Vec<String>,
    pub meteorological_cues: Vec<String>,
}

impl Default for ValidationLexicons {
    fn default() -> Self {
        ValidationLexicons {
            uncertainty: ["possibly", "uncertain", "maybe", "perhaps", "unclear"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            meteorological_cues: [
                "fog", "rain", "snow", "clear", "haze", "diffusion", "reflections",
                "glare", "dark", "overexposed", "wind", "flake", "smear", "overcast",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accepted: bool,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionDraft {
    pub weather_text: String,
    pub spatial_text: String,
}

/// Extracts the clause (comma/period-delimited) mentioning visibility.
fn visibility_clause(text: &str) -> Option<String> {
    text.split(['.', ',', ';'])
        .map(str::trim)
        .find(|c| c.to_lowercase().contains("visibility"))
        .map(str::to_string)
}

/// Extracts an open-set weather label from a "weather: <label>" marker.
pub fn extract_weather_label(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    let idx = lower.find("weather:")?;
    let rest = &text[idx + "weather:".len()..];
    let label: String = rest
        .split(['.', ',', ';', '\n'])
        .next()
        .unwrap_or("")
        .trim()
        .to_string();
    if label.is_empty() {
        None
    } else {
        Some(label)
    }
}

pub fn validate_caption(draft: &CaptionDraft, lexicons: &ValidationLexicons) -> ValidationReport {
    let mut reasons = Vec::new();
    let weather_lower = draft.weather_text.to_lowercase();
    let all_lower = format!("{weather_lower} {}", draft.spatial_text.to_lowercase());
    if visibility_clause(&draft.weather_text).is_none() {
        reasons.push("missing visibility clause".to_string());
    }
    if !lexicons
        .meteorological_cues
        .iter()
        .any(|c| weather_lower.contains(c.as_str()))
    {
        reasons.push("no meteorological cue term".to_string());
    }
    for term in &lexicons.uncertainty {
        if all_lower.contains(term.as_str()) {
            reasons.push(format!("uncertainty term present: {term}"));
        }
    }
    if extract_weather_label(&draft.weather_text).is_none() {
        reasons.push("no extractable weather label".to_string());
    }
    ValidationReport {
        accepted: reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStatus {
    Accepted,
    RejectedExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub location_id: usize,
    pub image_ref: String,
    pub weather_text: String,
    pub visibility_clause: String,
    pub weather_label: String,
    pub spatial_text: String,
    pub region_hints: Vec<String>,
    pub region_boxes: Vec<GroundTruthRegion>,
    pub attempts: u32,
    pub status: CaptionStatus,
}

impl CaptionRecord {
    /// Full text used by the text encoder at train/eval time.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.weather_text, self.spatial_text)
    }
}

/// Top-3 regions by area, descending; ties break by (cx, cy) lexicographic.
pub fn extract_region_hints(
    regions: &[GroundTruthRegion],
) -> Result<Vec<(String, GroundTruthRegion)>> {
    if regions.len() < 3 {
        return Err(CvError::invalid(format!(
            "need at least 3 regions for hints, got {}",
            regions.len()
        )));
    }
    let mut sorted: Vec<&GroundTruthRegion> = regions.iter().collect();
    sorted.sort_by(|a, b| {
        b.area()
            .partial_cmp(&a.area())
            .unwrap()
            .then(a.cx.partial_cmp(&b.cx).unwrap())
            .then(a.cy.partial_cmp(&b.cy).unwrap())
    });
    Ok(sorted
        .into_iter()
        .take(3)
        .map(|r| (r.label_text.clone(), r.clone()))
        .collect())
}

fn substitute_prior(prompts: &[Prompt], prior: &str) -> Vec<Prompt> {
    prompts
        .iter()
        .map(|p| Prompt {
            id: p.id,
            phase: p.phase,
            text: p.text.replace(WEATHER_PRIOR_SLOT, prior),
        })
        .collect()
}

/// Runs query -> validate up to max_retries; never returns a partial record.
#[allow(clippy::too_many_arguments)]
pub fn generate_caption_record(
    image: &ImageTensor,
    regions: &[GroundTruthRegion],
    client: &dyn LvlmClient,
    cfg: &CotConfig,
    lexicons: &ValidationLexicons,
    location_id: usize,
    image_ref: &str,
) -> Result<CaptionRecord> {
    let prompts = build_prompts(cfg)?;
    let weather_prompts: Vec<Prompt> = prompts
        .iter()
        .filter(|p| p.phase == PromptPhase::Weather)
        .cloned()
        .collect();
    let spatial_prompts: Vec<Prompt> = prompts
        .iter()
        .filter(|p| p.phase == PromptPhase::Spatial)
        .cloned()
        .collect();
    let hints = extract_region_hints(regions)?;

    let mut attempts = 0;
    while attempts < cfg.max_retries {
        attempts += 1;
        let weather_answers = client.answer(image, &weather_prompts);
        let weather_text = weather_answers.join(" ");
        let label = extract_weather_label(&weather_text).unwrap_or_default();
        let spatial_text = if spatial_prompts.is_empty() {
            // one-shot mode: the single answer carries both facets
            weather_text.clone()
        } else {
            client
                .answer(image, &substitute_prior(&spatial_prompts, &label))
                .join(" ")
        };
        let draft = CaptionDraft {
            weather_text: weather_text.clone(),
            spatial_text: spatial_text.clone(),
        };
        let report = validate_caption(&draft, lexicons);
        if report.accepted {
            return Ok(CaptionRecord {
                location_id,
                image_ref: image_ref.to_string(),
                visibility_clause: visibility_clause(&weather_text).unwrap_or_default(),
                weather_label: label,
                weather_text,
                spatial_text,
                region_hints: hints.iter().map(|(t, _)| t.clone()).collect(),
                region_boxes: hints.iter().map(|(_, b)| b.clone()).collect(),
                attempts,
                status: CaptionStatus::Accepted,
            });
        }
    }
    Ok(CaptionRecord {
        location_id,
        image_ref: image_ref.to_string(),
        weather_text: String::new(),
        visibility_clause: String::new(),
        weather_label: String::new(),
        spatial_text: String::new(),
        region_hints: hints.iter().map(|(t, _)| t.clone()).collect(),
        region_boxes: hints.iter().map(|(_, b)| b.clone()).collect(),
        attempts,
        status: CaptionStatus::RejectedExhausted,
    })
}

/// Deterministic client templating answers from toy scene facts and the
/// weather condition the rendered image was corrupted with.
pub struct MockLvlmClient {
    pub facts: SceneFacts,
    pub weather_phrase: String,
}

impl MockLvlmClient {
    pub fn new(facts: SceneFacts, weather_phrase: impl Into<String>) -> Self {
        MockLvlmClient {
            facts,
            weather_phrase: weather_phrase.into(),
        }
    }

    fn visibility_text(&self) -> String {
        if self.weather_phrase == "clear" {
            "visibility is high".to_string()
        } else {
            format!("visibility is low in {}", self.weather_phrase)
        }
    }

    fn cues_text(&self) -> String {
        if self.weather_phrase == "clear" {
            "clear air, sharp shadows".to_string()
        } else {
            format!("{} diffusion and reflections", self.weather_phrase)
        }
    }

    fn label_text(&self) -> String {
        format!("weather: {}", self.weather_phrase)
    }

    fn layout_text(&self) -> String {
        format!(
            "layout: {}; {}",
            self.facts.layout,
            self.facts.placements.join(", ")
        )
    }

    fn elements_text(&self) -> String {
        format!(
            "{} blocks, {} strips, dominant {}: {}",
            self.facts.block_count,
            self.facts.strip_count,
            self.facts.dominant_color,
            self.facts.placements.join(", ")
        )
    }

    fn relations_text(&self) -> String {
        format!(
            "{} elements: {}",
            self.facts.object_count,
            self.facts.placements.join(", ")
        )
    }
}

impl LvlmClient for MockLvlmClient {
    fn answer(&self, _image: &ImageTensor, prompts: &[Prompt]) -> Vec<String> {
        prompts
            .iter()
            .map(|p| match p.id {
                PromptId::OneShot => format!(
                    "{}. {}. {}. {}. {}",
                    self.visibility_text(),
                    self.cues_text(),
                    self.label_text(),
                    self.layout_text(),
                    self.elements_text()
                ),
                PromptId::WeatherFull => format!(
                    "{}. {}. {}",
                    self.visibility_text(),
                    self.cues_text(),
                    self.label_text()
                ),
                PromptId::WeatherObservation => {
                    format!("{}. {}", self.visibility_text(), self.cues_text())
                }
                PromptId::Visibility => self.visibility_text(),
                PromptId::AtmosphericCues => self.cues_text(),
                PromptId::WeatherLabel => self.label_text(),
                PromptId::SpatialFull => format!(
                    "{}. {}. {}",
                    self.layout_text(),
                    self.elements_text(),
                    self.relations_text()
                ),
                PromptId::SpatialLayout => {
                    format!("{}. {}", self.layout_text(), self.elements_text())
                }
                PromptId::MacroLayout => self.layout_text(),
                PromptId::StructuralElements => self.elements_text(),
                PromptId::TopologicalRelations => self.relations_text(),
            })
            .collect()
    }
}

/// Test/client harness: replays a fixed sequence of weather-phase answers,
/// one per attempt, to exercise the rejection/regeneration loop.
pub struct ScriptedClient {
    answers: Vec<String>,
    cursor: Cell<usize>,
}

impl ScriptedClient {
    pub fn new(answers: Vec<String>) -> Self {
        ScriptedClient {
            answers,
            cursor: Cell::new(0),
        }
    }
}

impl LvlmClient for ScriptedClient {
    fn answer(&self, _image: &ImageTensor, prompts: &[Prompt]) -> Vec<String> {
        // advance only on weather-phase queries; spatial answers are constant
        if prompts.iter().any(|p| p.phase == PromptPhase::Weather) {
            let i = self.cursor.get().min(self.answers.len() - 1);
            self.cursor.set(self.cursor.get() + 1);
            vec![self.answers[i].clone(); prompts.len()]
        } else {
            vec!["layout: scripted scene".to_string(); prompts.len()]
        }
    }
}

/// Append-only caption store, one JSON record per line.
pub fn append_records(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CvError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CvError::serde(path, e))?;
        writeln!(file, "{line}").map_err(|e| CvError::io(path, e))?;
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CvError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CvError::serde(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_toy_world;

    fn toy_inputs() -> (ImageTensor, Vec<GroundTruthRegion>, SceneFacts) {
        let world = generate_toy_world(7, 1, 1).unwrap();
        let scene = &world.locations[0];
        let (img, regions) =
            crate::dataset::render_views(scene, crate::dataset::ViewKind::Drone, 1);
        (img, regions, scene.facts.clone())
    }

    #[test]
    fn prompt_counts_per_step_mode() {
        for (steps, n) in [(0u8, 1usize), (2, 2), (4, 4), (6, 6)] {
            let cfg = CotConfig::new(steps, 3).unwrap();
            assert_eq!(build_prompts(&cfg).unwrap().len(), n);
        }
        assert!(CotConfig::new(3, 3).is_err());
    }

    #[test]
    fn six_step_prompts_follow_the_phase_decomposition() {
        let prompts = build_prompts(&CotConfig::new(6, 3).unwrap()).unwrap();
        assert!(prompts[0].text.to_lowercase().contains("visibility"));
        assert!(prompts[2].text.to_lowercase().contains("weather"));
        assert!(prompts[3].text.to_lowercase().contains("layout"));
        assert_eq!(
            prompts.iter().filter(|p| p.phase == PromptPhase::Weather).count(),
            3
        );
        assert_eq!(
            prompts.iter().filter(|p| p.phase == PromptPhase::Spatial).count(),
            3
        );
    }

    #[test]
    fn six_step_refines_two_step() {
        // both phases present in both modes; 6 splits each phase into three
        for steps in [2u8, 6] {
            let prompts = build_prompts(&CotConfig::new(steps, 3).unwrap()).unwrap();
            assert!(prompts.iter().any(|p| p.phase == PromptPhase::Weather));
            assert!(prompts.iter().any(|p| p.phase == PromptPhase::Spatial));
        }
    }

    #[test]
    fn validation_accepts_and_rejects_per_rules() {
        let lex = ValidationLexicons::default();
        let ok = CaptionDraft {
            weather_text: "visibility is low, dense fog diffusion, weather: fog".into(),
            spatial_text: "layout: compact".into(),
        };
        assert!(validate_caption(&ok, &lex).accepted);

        let uncertain = CaptionDraft {
            weather_text: "visibility is low, possibly rainy, weather: rain".into(),
            spatial_text: String::new(),
        };
        let rep = validate_caption(&uncertain, &lex);
        assert!(!rep.accepted);
        assert!(rep.reasons.iter().any(|r| r.contains("uncertainty")));

        let no_vis = CaptionDraft {
            weather_text: "dense fog everywhere, weather: fog".into(),
            spatial_text: String::new(),
        };
        let rep = validate_caption(&no_vis, &lex);
        assert!(!rep.accepted);
        assert!(rep.reasons.iter().any(|r| r.contains("visibility")));
    }

    #[test]
    fn validation_is_idempotent_on_accepted_records() {
        let (img, regions, facts) = toy_inputs();
        let client = MockLvlmClient::new(facts, "fog");
        let rec = generate_caption_record(
            &img,
            &regions,
            &client,
            &CotConfig::default(),
            &ValidationLexicons::default(),
            0,
            "img0",
        )
        .unwrap();
        assert_eq!(rec.status, CaptionStatus::Accepted);
        let draft = CaptionDraft {
            weather_text: rec.weather_text.clone(),
            spatial_text: rec.spatial_text.clone(),
        };
        assert!(validate_caption(&draft, &ValidationLexicons::default()).accepted);
    }

    #[test]
    fn mock_pipeline_fills_all_fields_on_first_attempt() {
        let (img, regions, facts) = toy_inputs();
        let client = MockLvlmClient::new(facts, "rain and fog");
        for steps in [0u8, 2, 4, 6] {
            let rec = generate_caption_record(
                &img,
                &regions,
                &client,
                &CotConfig::new(steps, 3).unwrap(),
                &ValidationLexicons::default(),
                3,
                "imgref",
            )
            .unwrap();
            assert_eq!(rec.status, CaptionStatus::Accepted, "steps={steps}");
            assert_eq!(rec.attempts, 1);
            assert_eq!(rec.weather_label, "rain and fog");
            assert!(!rec.visibility_clause.is_empty());
            assert_eq!(rec.region_hints.len(), 3);
            assert_eq!(rec.region_boxes.len(), 3);
        }
    }

    #[test]
    fn retry_then_accept_counts_attempts() {
        let (img, regions, _) = toy_inputs();
        let client = ScriptedClient::new(vec![
            "uncertain sky".into(),
            "uncertain sky".into(),
            "visibility is low, fog diffusion, weather: fog".into(),
        ]);
        let rec = generate_caption_record(
            &img,
            &regions,
            &client,
            &CotConfig::new(2, 5).unwrap(),
            &ValidationLexicons::default(),
            0,
            "i",
        )
        .unwrap();
        assert_eq!(rec.status, CaptionStatus::Accepted);
        assert_eq!(rec.attempts, 3);
    }

    #[test]
    fn exhaustion_yields_rejected_record() {
        let (img, regions, _) = toy_inputs();
        let client = ScriptedClient::new(vec!["no good answer".into()]);
        let rec = generate_caption_record(
            &img,
            &regions,
            &client,
            &CotConfig::new(2, 3).unwrap(),
            &ValidationLexicons::default(),
            0,
            "i",
        )
        .unwrap();
        assert_eq!(rec.status, CaptionStatus::RejectedExhausted);
        assert_eq!(rec.attempts, 3);
        assert!(rec.weather_text.is_empty());
    }

    #[test]
    fn hint_selection_by_area_with_ties() {
        let mk = |cx: f64, cy: f64, w: f64, h: f64, t: &str| GroundTruthRegion {
            cx,
            cy,
            w,
            h,
            label_text: t.into(),
        };
        let regions = vec![
            mk(0.2, 0.2, 0.1, 0.1, "small"),
            mk(0.5, 0.5, 0.3, 0.3, "big"),
            mk(0.3, 0.8, 0.2, 0.2, "tie-right"),
            mk(0.2, 0.8, 0.2, 0.2, "tie-left"),
            mk(0.8, 0.2, 0.25, 0.2, "mid"),
        ];
        let hints = extract_region_hints(&regions).unwrap();
        assert_eq!(hints[0].0, "big");
        assert_eq!(hints[1].0, "mid");
        assert_eq!(hints[2].0, "tie-left"); // tie broken by smaller cx
        assert!(extract_region_hints(&regions[..2]).is_err());
    }

    #[test]
    fn store_roundtrip() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("captions.jsonl");
        let (img, regions, facts) = toy_inputs();
        let client = MockLvlmClient::new(facts, "snow");
        let rec = generate_caption_record(
            &img,
            &regions,
            &client,
            &CotConfig::default(),
            &ValidationLexicons::default(),
            0,
            "x",
        )
        .unwrap();
        append_records(&path, &[rec.clone()]).unwrap();
        append_records(&path, &[rec.clone()]).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded, vec![rec.clone(), rec]);
    }
}

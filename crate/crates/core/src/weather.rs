//! Parametric, seeded weather corruption of images.
//!
//! Each layer kind is deterministic in (image, intensity, layer_seed),
//! a pixel-exact no-op at intensity 0, and monotone in intensity where
//! that is meaningful (fog pulls pixels toward the fog color with weight
//! proportional to intensity). Composites apply layers in listed order.

use crate::error::{CvError, Result};
use crate::imagetensor::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FOG_COLOR: [f64; 3] = [0.78, 0.78, 0.80];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherKind {
    Fog,
    Rain,
    Snow,
    Dark,
    Overexposure,
    Wind,
}

impl WeatherKind {
    pub fn label(&self) -> &'static str {
        match self {
            WeatherKind::Fog => "fog",
            WeatherKind::Rain => "rain",
            WeatherKind::Snow => "snow",
            WeatherKind::Dark => "dark",
            WeatherKind::Overexposure => "overexposure",
            WeatherKind::Wind => "wind",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherLayer {
    pub kind: WeatherKind,
    pub intensity: f64,
    pub layer_seed: u64,
}

/// Ordered list of weather layers; an empty list is the Normal condition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeatherSpec {
    pub layers: Vec<WeatherLayer>,
}

impl WeatherSpec {
    pub fn normal() -> Self {
        WeatherSpec { layers: Vec::new() }
    }

    pub fn single(kind: WeatherKind, intensity: f64, layer_seed: u64) -> Self {
        WeatherSpec {
            layers: vec![WeatherLayer {
                kind,
                intensity,
                layer_seed,
            }],
        }
    }

    pub fn is_normal(&self) -> bool {
        self.layers.is_empty()
    }

    /// Same layers with per-layer seeds derived from `seed` (for per-sample
    /// variation during training while keeping apply_weather pure).
    pub fn reseeded(&self, seed: u64) -> WeatherSpec {
        WeatherSpec {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| WeatherLayer {
                    layer_seed: seed
                        .wrapping_mul(0x9E3779B97F4A7C15)
                        .wrapping_add(i as u64),
                    ..*l
                })
                .collect(),
        }
    }
}

/// Applies layers in order; output is clamped to [0,1].
pub fn apply_weather(image: &ImageTensor, spec: &WeatherSpec) -> Result<ImageTensor> {
    for layer in &spec.layers {
        if !(0.0..=1.0).contains(&layer.intensity) {
            return Err(CvError::invalid(format!(
                "weather intensity {} outside [0,1]",
                layer.intensity
            )));
        }
    }
    let mut out = image.clone();
    for layer in &spec.layers {
        out = apply_layer(&out, layer);
    }
    out.clamp_in_place();
    Ok(out)
}

fn apply_layer(image: &ImageTensor, layer: &WeatherLayer) -> ImageTensor {
    let t = layer.intensity;
    if t == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(layer.layer_seed);
    match layer.kind {
        WeatherKind::Fog => fog(image, t, &mut rng),
        WeatherKind::Rain => rain(image, t, &mut rng),
        WeatherKind::Snow => snow(image, t, &mut rng),
        WeatherKind::Dark => dark(image, t),
        WeatherKind::Overexposure => overexposure(image, t),
        WeatherKind::Wind => wind(image, t),
    }
}

/// Convex blend toward the fog color, modulated by a low-frequency seeded
/// noise mask. Blend weight is proportional to intensity, so the distance
/// to the fog color is non-increasing in intensity.
fn fog(image: &ImageTensor, t: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
    // coarse noise grid, bilinearly upsampled
    let gh = (image.height / 8).max(2);
    let gw = (image.width / 8).max(2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let fy = y as f64 / image.height as f64 * (gh - 1) as f64;
            let fx = x as f64 / image.width as f64 * (gw - 1) as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            let n = grid[y0 * gw + x0] * (1.0 - dy) * (1.0 - dx)
                + grid[y0 * gw + x1] * (1.0 - dy) * dx
                + grid[y1 * gw + x0] * dy * (1.0 - dx)
                + grid[y1 * gw + x1] * dy * dx;
            let w = t * (0.7 + 0.3 * n);
            let p = image.get(y, x);
            out.set(
                y,
                x,
                [
                    p[0] * (1.0 - w) + FOG_COLOR[0] * w,
                    p[1] * (1.0 - w) + FOG_COLOR[1] * w,
                    p[2] * (1.0 - w) + FOG_COLOR[2] * w,
                ],
            );
        }
    }
    out
}

/// Short bright slanted streaks; streak count scales with intensity.
fn rain(image: &ImageTensor, t: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut out = image.clone();
    let area = image.height * image.width;
    let count = (t * area as f64 / 45.0).round() as usize;
    for _ in 0..count {
        let x0 = rng.random_range(0..image.width) as i64;
        let y0 = rng.random_range(0..image.height) as i64;
        let len = rng.random_range(5..10) as i64;
        for k in 0..len {
            let y = y0 + k;
            let x = x0 + k / 2;
            if y >= 0 && (y as usize) < image.height && x >= 0 && (x as usize) < image.width {
                let p = out.get(y as usize, x as usize);
                out.set(
                    y as usize,
                    x as usize,
                    [
                        p[0] * 0.4 + 0.85 * 0.6,
                        p[1] * 0.4 + 0.88 * 0.6,
                        p[2] * 0.4 + 0.95 * 0.6,
                    ],
                );
            }
        }
    }
    out
}

/// White flakes with jittered positions; flake count scales with intensity.
fn snow(image: &ImageTensor, t: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut out = image.clone();
    let area = image.height * image.width;
    let count = (t * area as f64 / 28.0).round() as usize;
    for _ in 0..count {
        let x = rng.random_range(0..image.width);
        let y = rng.random_range(0..image.height);
        let r = rng.random_range(0..3);
        for dy in -(r as i64)..=(r as i64) {
            for dx in -(r as i64)..=(r as i64) {
                if dy * dy + dx * dx > (r * r) as i64 {
                    continue;
                }
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0
                    && (yy as usize) < image.height
                    && xx >= 0
                    && (xx as usize) < image.width
                {
                    out.set(yy as usize, xx as usize, [0.97, 0.97, 0.98]);
                }
            }
        }
    }
    out
}

/// Gamma increase plus gain reduction.
fn dark(image: &ImageTensor, t: f64) -> ImageTensor {
    let gamma = 1.0 + 1.5 * t;
    let gain = 1.0 - 0.65 * t;
    let mut out = image.clone();
    for v in &mut out.data {
        *v = v.max(0.0).powf(gamma) * gain;
    }
    out
}

/// Gain increase with highlight clipping.
fn overexposure(image: &ImageTensor, t: f64) -> ImageTensor {
    let gain = 1.0 + 1.8 * t;
    let lift = 0.25 * t;
    let mut out = image.clone();
    for v in &mut out.data {
        *v = (*v * gain + lift).min(1.0);
    }
    out
}

/// Horizontal motion blur; kernel length grows with intensity (1 = no-op).
fn wind(image: &ImageTensor, t: f64) -> ImageTensor {
    let k = 1 + (t * 8.0).round() as usize;
    if k <= 1 {
        return image.clone();
    }
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for d in 0..k {
                let xx = x as i64 + d as i64 - (k / 2) as i64;
                if xx >= 0 && (xx as usize) < image.width {
                    let p = image.get(y, xx as usize);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                    n += 1.0;
                }
            }
            out.set(y, x, [acc[0] / n, acc[1] / n, acc[2] / n]);
        }
    }
    out
}

pub const DEFAULT_INTENSITY: f64 = 0.5;

/// The 10 named evaluation conditions. Default intensity 0.5 per layer;
/// layer seeds are fixed per position so the suite itself is deterministic.
pub fn condition_suite() -> Vec<(String, WeatherSpec)> {
    let layer = |kind, seed| WeatherLayer {
        kind,
        intensity: DEFAULT_INTENSITY,
        layer_seed: seed,
    };
    let combo = |kinds: &[WeatherKind]| WeatherSpec {
        layers: kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| layer(k, i as u64))
            .collect(),
    };
    vec![
        ("Normal".to_string(), WeatherSpec::normal()),
        ("Fog".to_string(), combo(&[WeatherKind::Fog])),
        ("Rain".to_string(), combo(&[WeatherKind::Rain])),
        ("Snow".to_string(), combo(&[WeatherKind::Snow])),
        (
            "Fog+Rain".to_string(),
            combo(&[WeatherKind::Fog, WeatherKind::Rain]),
        ),
        (
            "Fog+Snow".to_string(),
            combo(&[WeatherKind::Fog, WeatherKind::Snow]),
        ),
        (
            "Rain+Snow".to_string(),
            combo(&[WeatherKind::Rain, WeatherKind::Snow]),
        ),
        ("Dark".to_string(), combo(&[WeatherKind::Dark])),
        ("Over-exp".to_string(), combo(&[WeatherKind::Overexposure])),
        ("Wind".to_string(), combo(&[WeatherKind::Wind])),
    ]
}

/// Human-readable description of a condition used by the mock captioner.
pub fn condition_phrase(spec: &WeatherSpec) -> String {
    if spec.is_normal() {
        return "clear".to_string();
    }
    spec.layers
        .iter()
        .map(|l| l.kind.label())
        .collect::<Vec<_>>()
        .join(" and ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> ImageTensor {
        let mut img = ImageTensor::filled(32, 32, [0.2, 0.5, 0.3]);
        for y in 0..32 {
            for x in 0..32 {
                if (x / 4 + y / 4) % 2 == 0 {
                    img.set(y, x, [0.8, 0.1, 0.4]);
                }
            }
        }
        img
    }

    #[test]
    fn normal_is_identity() {
        let img = test_image();
        assert_eq!(apply_weather(&img, &WeatherSpec::normal()).unwrap(), img);
    }

    #[test]
    fn zero_intensity_is_identity_for_every_kind() {
        let img = test_image();
        for kind in [
            WeatherKind::Fog,
            WeatherKind::Rain,
            WeatherKind::Snow,
            WeatherKind::Dark,
            WeatherKind::Overexposure,
            WeatherKind::Wind,
        ] {
            let spec = WeatherSpec::single(kind, 0.0, 3);
            assert_eq!(apply_weather(&img, &spec).unwrap(), img, "{kind:?}");
        }
    }

    #[test]
    fn full_fog_moves_every_pixel_toward_fog_color() {
        let img = test_image();
        let out = apply_weather(&img, &WeatherSpec::single(WeatherKind::Fog, 1.0, 5)).unwrap();
        // brute-force pixel scan oracle
        for y in 0..img.height {
            for x in 0..img.width {
                let d_orig: f64 = img
                    .get(y, x)
                    .iter()
                    .zip(&FOG_COLOR)
                    .map(|(p, f)| (p - f).abs())
                    .sum();
                let d_new: f64 = out
                    .get(y, x)
                    .iter()
                    .zip(&FOG_COLOR)
                    .map(|(p, f)| (p - f).abs())
                    .sum();
                assert!(d_new <= d_orig + 1e-12, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn fog_visibility_monotone_in_intensity() {
        let img = test_image();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let out = apply_weather(&img, &WeatherSpec::single(WeatherKind::Fog, t, 5)).unwrap();
            let mad: f64 = (0..img.height)
                .flat_map(|y| (0..img.width).map(move |x| (y, x)))
                .map(|(y, x)| {
                    out.get(y, x)
                        .iter()
                        .zip(&FOG_COLOR)
                        .map(|(p, f)| (p - f).abs())
                        .sum::<f64>()
                })
                .sum::<f64>();
            assert!(mad <= prev + 1e-9, "not monotone at t={t}");
            prev = mad;
        }
    }

    #[test]
    fn deterministic_and_range_safe() {
        let img = test_image();
        for (name, spec) in condition_suite() {
            let a = apply_weather(&img, &spec).unwrap();
            let b = apply_weather(&img, &spec).unwrap();
            assert_eq!(a, b, "{name} not deterministic");
            assert!(a.in_unit_range(), "{name} out of range");
        }
    }

    #[test]
    fn suite_matches_expected_layout() {
        let suite = condition_suite();
        assert_eq!(suite.len(), 10);
        assert!(suite[0].1.layers.is_empty());
        let fog_rain = &suite.iter().find(|(n, _)| n == "Fog+Rain").unwrap().1;
        assert_eq!(fog_rain.layers[0].kind, WeatherKind::Fog);
        assert_eq!(fog_rain.layers[1].kind, WeatherKind::Rain);
    }

    #[test]
    fn intensity_out_of_range_rejected() {
        let img = test_image();
        let spec = WeatherSpec::single(WeatherKind::Fog, 1.5, 0);
        assert!(apply_weather(&img, &spec).is_err());
    }
}

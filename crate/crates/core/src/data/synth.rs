//! Synthetic multi-label images: each class draws its own geometric motif
//! at a class-specific location on a noisy background.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::imaging::{encode_png, load_images};
use super::{load_manifest_with, DatasetManifest, ManifestRecord, Provenance};
use crate::error::{Error, Result};

/// Class names, one per motif, in label order.
pub const MOTIFS: [&str; 6] = ["bar", "disk", "ring", "blob", "gradient", "checker"];

pub const CSV_NAME: &str = "labels.csv";
pub const IMAGE_DIR: &str = "images";
pub const META_NAME: &str = "dataset.json";

/// Raises `P(target)` by `delta` in samples where `given` is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boost {
    pub given: usize,
    pub target: usize,
    pub delta: f64,
}

/// Omitted fields take their [`Default`] values when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Per-class prevalence; its length is the label count.
    pub prevalences: Vec<f64>,
    #[serde(default)]
    pub cooccurrence: Vec<Boost>,
    pub image_size: usize,
    /// Standard deviation of per-pixel background noise (intensity in [0, 1]).
    pub noise: f64,
    /// Peak intensity a motif adds to the background.
    pub contrast: f64,
    /// Maximum motif displacement from its anchor, in pixels.
    pub jitter: usize,
    pub samples: usize,
    /// Mean number of samples sharing a patient id.
    pub samples_per_patient: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            prevalences: vec![0.30, 0.20, 0.15, 0.10, 0.05, 0.02],
            cooccurrence: Vec::new(),
            image_size: 32,
            noise: 0.15,
            contrast: 0.35,
            jitter: 3,
            samples: 2000,
            samples_per_patient: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.prevalences.len()
    }

    pub fn class_names(&self) -> Vec<&'static str> {
        MOTIFS[..self.num_classes().min(MOTIFS.len())].to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_classes();
        if l == 0 || l > MOTIFS.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 1..={} classes, got {l}",
                MOTIFS.len()
            )));
        }
        if let Some(p) = self.prevalences.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("prevalence {p} outside [0, 1]")));
        }
        for b in &self.cooccurrence {
            if b.given >= l || b.target >= l || b.given == b.target || !b.delta.is_finite() {
                return Err(Error::Config(format!("invalid co-occurrence boost {b:?}")));
            }
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} below 16", self.image_size)));
        }
        if !(self.noise >= 0.0 && self.contrast > 0.0) {
            return Err(Error::Config("noise must be >= 0 and contrast > 0".into()));
        }
        if self.samples_per_patient == 0 {
            return Err(Error::Config("samples_per_patient must be at least 1".into()));
        }
        Ok(())
    }
}

/// A manifest together with its decoded images, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportMeta {
    class_names: Vec<String>,
    provenance: Provenance,
}

fn draw_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut labels = vec![0u8; spec.num_classes()];
    for c in 0..labels.len() {
        let boost: f64 = spec
            .cooccurrence
            .iter()
            .filter(|b| b.target == c && labels[b.given] == 1)
            .map(|b| b.delta)
            .sum();
        let p = (spec.prevalences[c] + boost).clamp(0.0, 1.0);
        // Always consume one draw so later classes see the same stream.
        let u: f64 = rng.random();
        labels[c] = u8::from(u < p);
    }
    labels
}

/// Intensity in [0, 1] of motif `class` at offset `(dx, dy)` from its centre.
fn motif(class: usize, dx: f64, dy: f64, r: f64) -> f64 {
    let d = (dx * dx + dy * dy).sqrt();
    let inside_square = dx.abs() <= r && dy.abs() <= r;
    match class {
        // Diagonal bar: distance to the segment along (1, 1).
        0 => {
            let t = ((dx + dy) / 2.0).clamp(-r, r);
            let dist = ((dx - t).powi(2) + (dy - t).powi(2)).sqrt();
            f64::from(dist <= 0.9)
        }
        1 => f64::from(d <= r - 0.5),
        2 => f64::from((d - r).abs() <= 0.8),
        3 => (-(d * d) / (2.0 * (r / 2.0).powi(2))).exp(),
        4 => {
            if inside_square {
                (dx + r) / (2.0 * r)
            } else {
                0.0
            }
        }
        _ => {
            let cell = ((dx + r).floor() as i64 / 2 + (dy + r).floor() as i64 / 2) % 2;
            f64::from(inside_square && cell == 0)
        }
    }
}

fn render(spec: &SyntheticSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> GrayImage {
    let s = spec.image_size;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let mut canvas: Vec<f64> = (0..s * s).map(|_| 0.3 + noise.sample(rng)).collect();
    let r = s as f64 / 8.0;
    for (c, &y) in labels.iter().enumerate() {
        if y == 0 {
            continue;
        }
        let (col, row) = (c % 3, c / 3);
        let j = spec.jitter as i64;
        let cx = (col as f64 + 0.5) * s as f64 / 3.0 + rng.random_range(-j..=j) as f64;
        let cy = (row as f64 + 0.5) * s as f64 / 2.0 + rng.random_range(-j..=j) as f64;
        for py in 0..s {
            for px in 0..s {
                let v = motif(c, px as f64 + 0.5 - cx, py as f64 + 0.5 - cy, r);
                canvas[py * s + px] += spec.contrast * v;
            }
        }
    }
    GrayImage::from_fn(s as u32, s as u32, |x, y| {
        let v = canvas[y as usize * s + x as usize].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Draws labels from the prevalences (plus boosts), renders each image and
/// groups consecutive samples into patients of 1 to `2m - 1` samples.
pub fn synth_generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.samples);
    let mut images = Vec::with_capacity(spec.samples);
    let (mut patient, mut visit, mut group) = (0usize, 0usize, 0usize);
    for _ in 0..spec.samples {
        if visit == group {
            patient += 1;
            visit = 0;
            group = rng.random_range(1..=2 * spec.samples_per_patient - 1);
        }
        let labels = draw_labels(spec, &mut rng);
        images.push(render(spec, &labels, &mut rng));
        let id = format!("{patient:05}_{visit:03}.png");
        records.push(ManifestRecord {
            sample_id: id.clone(),
            patient_id: format!("{patient:05}"),
            labels,
            locator: id,
        });
        visit += 1;
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            records,
            class_names: spec.class_names().iter().map(|c| c.to_string()).collect(),
            provenance: Provenance::Synthetic { seed },
        },
        images,
    })
}

impl SyntheticDataset {
    /// Writes `labels.csv`, `dataset.json` and one 8-bit PNG per sample
    /// under `images/`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let images = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        self.manifest.write_csv(&dir.join(CSV_NAME))?;
        let meta = ExportMeta {
            class_names: self.manifest.class_names.clone(),
            provenance: self.manifest.provenance.clone(),
        };
        let meta_path = dir.join(META_NAME);
        let mut json = serde_json::to_vec_pretty(&meta)?;
        json.push(b'\n');
        std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            let path = images.join(&r.locator);
            std::fs::write(&path, encode_png(img)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a directory written by [`SyntheticDataset::export`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_NAME);
        let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ExportMeta = serde_json::from_slice(&bytes)?;
        let names: Vec<&str> = meta.class_names.iter().map(String::as_str).collect();
        let mut manifest = load_manifest_with(&dir.join(CSV_NAME), &names)?;
        manifest.provenance = meta.provenance;
        let images = load_images(&manifest, &dir.join(IMAGE_DIR))?;
        Ok(SyntheticDataset { manifest, images })
    }
}

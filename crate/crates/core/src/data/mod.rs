//! Label manifests, patient-wise splits, preprocessing and the synthetic
//! imbalanced dataset generator.

pub mod imaging;
pub mod synth;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// The 14 pathology labels in benchmark order.
pub const CANONICAL_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
];

pub const NO_FINDING: &str = "No Finding";
pub const COL_IMAGE: &str = "Image Index";
pub const COL_LABELS: &str = "Finding Labels";
pub const COL_PATIENT: &str = "Patient ID";

/// Spellings accepted in addition to the class names themselves.
const ALIASES: &[(&str, &str)] = &[("Pleural_Thickening", "Pleural Thickening")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub patient_id: String,
    pub labels: Vec<u8>,
    /// Image path relative to the dataset's image root.
    pub locator: String,
}

impl ManifestRecord {
    pub fn is_abnormal(&self) -> bool {
        self.labels.contains(&1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn with_records(&self, records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            records,
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// `Finding Labels` cell for a label vector.
    pub fn finding_labels(&self, labels: &[u8]) -> String {
        let names: Vec<&str> = labels
            .iter()
            .zip(&self.class_names)
            .filter(|(&y, _)| y == 1)
            .map(|(_, n)| n.as_str())
            .collect();
        if names.is_empty() {
            NO_FINDING.to_string()
        } else {
            names.join("|")
        }
    }

    /// Writes the three-column manifest layout read by [`load_manifest_with`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record([COL_IMAGE, COL_LABELS, COL_PATIENT])?;
        for r in &self.records {
            w.write_record([r.locator.as_str(), &self.finding_labels(&r.labels), r.patient_id.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a manifest labelled with the 14 canonical classes.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, &CANONICAL_CLASSES)
}

/// Reads a manifest in the benchmark CSV layout: a header row with at least
/// `Image Index`, `Finding Labels` (pipe-separated names or `No Finding`)
/// and `Patient ID`. Row numbers in errors are file line numbers.
pub fn load_manifest_with(path: &Path, classes: &[&str]) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file, classes)
}

pub fn parse_manifest(reader: impl std::io::Read, classes: &[&str]) -> Result<DatasetManifest> {
    // The published CSV's header ends in a trailing comma, so rows carry one
    // field fewer than the header.
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Manifest {
            row: 1,
            detail: format!("missing column {name:?}"),
        })
    };
    let (ci, cl, cp) = (col(COL_IMAGE)?, col(COL_LABELS)?, col(COL_PATIENT)?);
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let lookup = |name: &str| {
        let canonical = ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, c)| *c);
        index.get(canonical).copied()
    };

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let err = |detail: String| Error::Manifest { row, detail };
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let sample_id = field(ci);
        if sample_id.is_empty() {
            return Err(err("empty image index".into()));
        }
        if !seen.insert(sample_id.to_string()) {
            return Err(err(format!("duplicate image index {sample_id:?}")));
        }
        let mut labels = vec![0u8; classes.len()];
        let findings = field(cl);
        if findings != NO_FINDING {
            for token in findings.split('|').map(str::trim) {
                let k = lookup(token).ok_or_else(|| err(format!("unknown pathology {token:?}")))?;
                labels[k] = 1;
            }
        }
        let patient_id = field(cp);
        if patient_id.is_empty() {
            return Err(err("empty patient id".into()));
        }
        records.push(ManifestRecord {
            sample_id: sample_id.to_string(),
            patient_id: patient_id.to_string(),
            labels,
            locator: sample_id.to_string(),
        });
    }
    Ok(DatasetManifest {
        records,
        class_names: classes.iter().map(|c| c.to_string()).collect(),
        provenance: Provenance::Real,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(x > 0.0)) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Partitions by patient: patients are shuffled with `seed`, then each goes
/// whole to the split whose sample count lies furthest below its target.
/// Sample order within each split follows the input manifest.
pub fn patient_split(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    let mut patients: Vec<&str> = Vec::new();
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for r in &manifest.records {
        let n = sizes.entry(r.patient_id.as_str()).or_insert(0);
        if *n == 0 {
            patients.push(&r.patient_id);
        }
        *n += 1;
    }
    if patients.len() < 3 {
        return Err(Error::invalid(
            "patient_split",
            format!("{} patients cannot fill 3 splits", patients.len()),
        ));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = manifest.len() as f64;
    let targets = [fractions.train * total, fractions.val * total, fractions.test * total];
    let mut counts = [0usize; 3];
    let mut assignment: HashMap<&str, usize> = HashMap::with_capacity(patients.len());
    for p in patients {
        let mut best = 0;
        for s in 1..3 {
            if targets[s] - counts[s] as f64 > targets[best] - counts[best] as f64 {
                best = s;
            }
        }
        counts[best] += sizes[p];
        assignment.insert(p, best);
    }
    let mut parts: [Vec<ManifestRecord>; 3] = Default::default();
    for r in &manifest.records {
        parts[assignment[r.patient_id.as_str()]].push(r.clone());
    }
    let [train, val, test] = parts;
    Ok(Split {
        train: manifest.with_records(train),
        val: manifest.with_records(val),
        test: manifest.with_records(test),
    })
}

/// Preprocessed single-channel images and labels held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub size: usize,
    pub num_labels: usize,
    /// `N * size * size` normalized pixels.
    pub images: Vec<f32>,
    /// `N * num_labels` binary labels.
    pub labels: Vec<u8>,
}

impl TensorSet {
    pub fn len(&self) -> usize {
        self.labels.len() / self.num_labels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_row(&self, i: usize) -> &[u8] {
        &self.labels[i * self.num_labels..][..self.num_labels]
    }

    /// Images `[B, 1, size, size]` and targets `[B, L]` for `indices`;
    /// samples with `flip[j]` set are mirrored horizontally.
    pub fn batch<T: Element>(&self, indices: &[usize], flip: Option<&[bool]>) -> (Tensor<T>, Tensor<T>) {
        let s = self.size;
        let plane = s * s;
        let mut x = Vec::with_capacity(indices.len() * plane);
        let mut y = Vec::with_capacity(indices.len() * self.num_labels);
        for (j, &i) in indices.iter().enumerate() {
            let img = &self.images[i * plane..][..plane];
            let mirror = flip.is_some_and(|f| f[j]);
            for row in img.chunks(s) {
                if mirror {
                    x.extend(row.iter().rev().map(|&v| T::from_f32(v).unwrap()));
                } else {
                    x.extend(row.iter().map(|&v| T::from_f32(v).unwrap()));
                }
            }
            y.extend(self.label_row(i).iter().map(|&v| T::from_u8(v).unwrap()));
        }
        let n = indices.len();
        (
            Tensor::new(x, &[n, 1, s, s]).expect("batch shape"),
            Tensor::new(y, &[n, self.num_labels]).expect("label shape"),
        )
    }
}

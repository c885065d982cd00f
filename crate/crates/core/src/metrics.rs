//! ROC-AUC for multi-label score matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid("auc", format!("score {i} is NaN")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. Uses midranks, `O(n log n)`.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = class_counts(scores, labels)?;
    let order = ascending(scores);
    // Twice the positive rank sum keeps every midrank an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p64, n64) = (p as u64, n as u64);
    let twice_u = twice_rank_sum - p64 * (p64 + 1);
    Ok(twice_u as f64 / (2 * p64 * n64) as f64)
}

/// ROC curve from a threshold sweep over distinct scores, highest first.
/// Starts at `(0, 0)` and ends at `(1, 1)`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = class_counts(scores, labels)?;
    let mut order = ascending(scores);
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

/// Area under a piecewise-linear curve by the trapezoid rule.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Post-sigmoid scores and binary labels, both row-major `N x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub class_names: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, class_names: Vec<String>) -> Result<Self> {
        let l = class_names.len();
        if l == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(l) {
            return Err(Error::invalid(
                "score_matrix",
                format!("{} scores / {} labels do not form an N x {l} matrix", scores.len(), labels.len()),
            ));
        }
        if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("score_matrix", format!("score {} at {i} outside [0, 1]", scores[i])));
        }
        Ok(ScoreMatrix {
            scores,
            labels,
            class_names,
        })
    }

    pub fn rows(&self) -> usize {
        self.scores.len() / self.class_names.len()
    }

    pub fn column(&self, class: usize) -> (Vec<f64>, Vec<bool>) {
        let l = self.class_names.len();
        let scores = self.scores.iter().skip(class).step_by(l).copied().collect();
        let labels = self.labels.iter().skip(class).step_by(l).copied().collect();
        (scores, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub name: String,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassResult>,
    /// Unweighted mean over classes with a defined AUC.
    pub mean_auc: f64,
    pub degenerate: usize,
}

impl EvalReport {
    /// Builds a report from per-class values alone (no ROC curves).
    pub fn from_aucs(names: &[&str], aucs: &[Option<f64>]) -> Result<Self> {
        let classes: Vec<ClassResult> = names
            .iter()
            .zip(aucs)
            .map(|(name, &auc)| ClassResult {
                name: name.to_string(),
                auc,
                positives: 0,
                negatives: 0,
                roc: Vec::new(),
            })
            .collect();
        Self::summarize(classes)
    }

    fn summarize(classes: Vec<ClassResult>) -> Result<Self> {
        let defined: Vec<f64> = classes.iter().filter_map(|c| c.auc).collect();
        if defined.is_empty() {
            return Err(Error::AllClassesDegenerate(classes.len()));
        }
        let mean_auc = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(EvalReport {
            degenerate: classes.len() - defined.len(),
            classes,
            mean_auc,
        })
    }
}

/// Per-class AUC and ROC; degenerate classes are flagged and left out of
/// the mean.
pub fn evaluate(m: &ScoreMatrix) -> Result<EvalReport> {
    if m.rows() < 2 {
        return Err(Error::invalid("evaluate", format!("need at least 2 samples, got {}", m.rows())));
    }
    let mut classes = Vec::with_capacity(m.class_names.len());
    for (c, name) in m.class_names.iter().enumerate() {
        let (scores, labels) = m.column(c);
        let positives = labels.iter().filter(|&&y| y).count();
        let (auc, roc) = match auc_binary(&scores, &labels) {
            Ok(a) => (Some(a), roc_points(&scores, &labels)?),
            Err(Error::DegenerateClass { .. }) => (None, Vec::new()),
            Err(e) => return Err(e),
        };
        classes.push(ClassResult {
            name: name.clone(),
            auc,
            positives,
            negatives: labels.len() - positives,
            roc,
        });
    }
    EvalReport::summarize(classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.3; 5], &b(&[0, 1, 0, 1, 1])).unwrap(), 0.5);
        assert!(matches!(
            auc_binary(&[0.1, 0.2], &b(&[1, 1])),
            Err(Error::DegenerateClass { positives: 2, negatives: 0 })
        ));
        assert!(auc_binary(&[f64::NAN, 0.2], &b(&[0, 1])).is_err());
    }

    #[test]
    fn roc_examples() {
        let pts = roc_points(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(trapezoid_area(&pts), 0.75);

        let pts = roc_points(&[0.5; 4], &b(&[0, 1, 1, 0])).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(trapezoid_area(&pts), 0.5);

        let pts = roc_points(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap();
        assert!(pts.contains(&(0.0, 1.0)));
    }

    #[test]
    fn evaluate_flags_degenerate_classes() {
        // Class 0 is defined, class 1 has no positives.
        let scores = vec![0.9, 0.1, 0.2, 0.4, 0.6, 0.5];
        let labels = b(&[1, 0, 0, 0, 1, 0]);
        let m = ScoreMatrix::new(scores, labels, vec!["a".into(), "b".into()]).unwrap();
        let r = evaluate(&m).unwrap();
        assert_eq!(r.degenerate, 1);
        assert_eq!(r.classes[1].auc, None);
        assert_eq!(r.mean_auc, r.classes[0].auc.unwrap());
        assert_eq!(r.mean_auc, 1.0);

        let none = ScoreMatrix::new(vec![0.5; 4], b(&[0, 0, 0, 0]), vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(evaluate(&none), Err(Error::AllClassesDegenerate(2))));
    }

    #[test]
    fn score_matrix_validation() {
        assert!(ScoreMatrix::new(vec![1.5, 0.0], b(&[1, 0]), vec!["a".into()]).is_err());
        assert!(ScoreMatrix::new(vec![0.5; 3], b(&[1, 0, 1]), vec!["a".into(), "b".into()]).is_err());
        let one_row = ScoreMatrix::new(vec![0.5, 0.5], b(&[1, 0]), vec!["a".into(), "b".into()]).unwrap();
        assert!(evaluate(&one_row).is_err());
    }
}

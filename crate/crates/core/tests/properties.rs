use std::collections::HashSet;

use cbamnet::data::{patient_split, DatasetManifest, ManifestRecord, Provenance, SplitFractions};
use cbamnet::losses::{bce_element, focal_element, FocalParams};
use cbamnet::metrics::{auc_binary, roc_points, trapezoid_area};
use cbamnet::tensor::ops::conv2d;
use cbamnet::tensor::reference::conv2d_direct;
use cbamnet::tensor::Tensor;
use proptest::prelude::*;

/// Scores drawn from a small integer range so ties are common, with at
/// least one positive and one negative.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..50)
        .prop_flat_map(|n| (prop::collection::vec(0i32..8, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes present", |(_, y)| y.iter().any(|&b| b) && y.iter().any(|&b| !b))
        .prop_map(|(s, y)| (s.into_iter().map(f64::from).collect(), y))
}

fn pairwise_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i]) {
        for j in (0..s.len()).filter(|&j| !y[j]) {
            pairs += 1.0;
            wins += match s[i].partial_cmp(&s[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn auc_matches_pairwise_counting((s, y) in scored_labels()) {
        prop_assert_eq!(auc_binary(&s, &y).unwrap(), pairwise_auc(&s, &y));
    }

    #[test]
    fn roc_area_equals_auc((s, y) in scored_labels()) {
        let area = trapezoid_area(&roc_points(&s, &y).unwrap());
        prop_assert!((area - auc_binary(&s, &y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_rank_invariant((s, y) in scored_labels()) {
        // Strictly increasing and exact on small integers.
        let t: Vec<f64> = s.iter().map(|v| v * v * v + 2.0 * v - 7.0).collect();
        prop_assert_eq!(auc_binary(&t, &y).unwrap(), auc_binary(&s, &y).unwrap());
    }

    #[test]
    fn auc_complement_symmetry((s, y) in scored_labels()) {
        let a = auc_binary(&s, &y).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
        prop_assert!((auc_binary(&neg, &y).unwrap() - (1.0 - a)).abs() <= 1e-12);
        prop_assert!((auc_binary(&s, &flipped).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn focal_reduces_to_bce(z in -50.0f64..50.0, y in any::<bool>()) {
        let y = f64::from(u8::from(y));
        let f = focal_element(z, y, &FocalParams { alpha: 1.0, gamma: 0.0 });
        prop_assert!((f - bce_element(z, y)).abs() <= 1e-12);
    }

    #[test]
    fn focal_bounded_by_scaled_bce(z in -50.0f64..50.0, y in any::<bool>(), alpha in 0.01f64..=1.0, gamma in 0.0f64..6.0) {
        let y = f64::from(u8::from(y));
        let p = FocalParams { alpha, gamma };
        let f = focal_element(z, y, &p);
        prop_assert!(f >= 0.0);
        prop_assert!(f <= alpha * bce_element(z, y) * (1.0 + 1e-12));
    }

    #[test]
    fn focal_decreases_with_gamma(z in -30.0f64..30.0, y in any::<bool>(), g in 0.0f64..5.0, dg in 0.0f64..3.0) {
        let y = f64::from(u8::from(y));
        let lo = focal_element(z, y, &FocalParams { alpha: 0.25, gamma: g });
        let hi = focal_element(z, y, &FocalParams { alpha: 0.25, gamma: g + dg });
        prop_assert!(hi <= lo * (1.0 + 1e-12));
    }

    #[test]
    fn bce_is_finite_for_extreme_logits(z in prop::num::f64::NORMAL, y in any::<bool>()) {
        let v = bce_element(z, f64::from(u8::from(y)));
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn patient_split_partitions_patients(
        sizes in prop::collection::vec(1usize..5, 3..60),
        seed in any::<u64>(),
        train in 0.1f64..0.8,
        val_share in 0.1f64..0.9,
    ) {
        let val = (1.0 - train) * val_share;
        let fractions = SplitFractions { train, val, test: 1.0 - train - val };
        let mut records = Vec::new();
        for (p, &k) in sizes.iter().enumerate() {
            for i in 0..k {
                records.push(ManifestRecord {
                    sample_id: format!("{p}_{i}.png"),
                    patient_id: p.to_string(),
                    labels: vec![u8::from(i % 2 == 0)],
                    locator: format!("{p}_{i}.png"),
                });
            }
        }
        let m = DatasetManifest { records, class_names: vec!["a".into()], provenance: Provenance::Real };
        let split = patient_split(&m, fractions, seed).unwrap();
        let ids = |d: &DatasetManifest| d.records.iter().map(|r| r.patient_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (ids(&split.train), ids(&split.val), ids(&split.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), m.len());
        prop_assert_eq!(&split, &patient_split(&m, fractions, seed).unwrap());
    }

    #[test]
    fn lowered_conv_matches_direct_loops(
        (n, c, h, w) in (1usize..3, 1usize..4, 3usize..9, 3usize..9),
        (o, k) in (1usize..4, 1usize..4),
        stride in 1usize..3,
        padding in 0usize..2,
        seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * padding >= k && w + 2 * padding >= k);
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x: Vec<f64> = (0..n * c * h * w).map(|_| next()).collect();
        let kern: Vec<f64> = (0..o * c * k * k).map(|_| next()).collect();
        let got = conv2d(
            &Tensor::new(x.clone(), &[n, c, h, w]).unwrap(),
            &Tensor::new(kern.clone(), &[o, c, k, k]).unwrap(),
            stride,
            padding,
        )
        .unwrap();
        let (want, (ho, wo)) = conv2d_direct(&x, (n, c, h, w), &kern, (o, k, k), stride, padding);
        prop_assert_eq!(got.shape(), &[n, o, ho, wo][..]);
        for (a, b) in got.to_vec().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

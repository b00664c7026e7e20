use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn sweep_eer(scores: &[f64], labels: &[u8]) -> f64 {
    let mut distinct = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut thresholds = vec![f64::INFINITY];
    for w in distinct.windows(2) {
        thresholds.push((w[0] + w[1]) / 2.0);
    }
    thresholds.push(f64::NEG_INFINITY);
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fp = scores.iter().zip(labels).filter(|(s, l)| **s > t && **l == 0).count() as f64;
            let miss = scores.iter().zip(labels).filter(|(s, l)| **s <= t && **l == 1).count() as f64;
            (fp / neg, miss / pos)
        })
        .collect();
    for k in 0..rates.len() {
        let (far, frr) = rates[k];
        let d = far - frr;
        if d >= 0.0 {
            if k == 0 || d == 0.0 {
                return far;
            }
            let (pfar, pfrr) = rates[k - 1];
            let dp = pfar - pfrr;
            let t = -dp / (d - dp);
            return pfar + t * (far - pfar);
        }
    }
    unreachable!()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.random_range(2..=12);
        let levels = rng.random_range(2..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

#[test]
fn reference_cases() {
    assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    assert_eq!(auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
    assert_eq!(eer(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 0.0);
    assert_eq!(eer(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(acc(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap(), 0.75);
    assert_eq!(acc(&[1, 0], &[1, 0]).unwrap(), 1.0);
    assert_eq!(acc(&[1, 0], &[0, 1]).unwrap(), 0.0);
}

#[test]
fn single_class_and_mismatch_are_errors() {
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
    assert!(matches!(eer(&[0.1, 0.2], &[0, 0]), Err(Error::Metric(_))));
    assert!(matches!(acc(&[1, 0], &[1]), Err(Error::Input(_))));
    assert!(matches!(auc(&[0.1], &[1, 0]), Err(Error::Input(_))));
}

#[test]
fn agrees_with_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        assert_eq!(auc(&s, &l).unwrap(), pair_count_auc(&s, &l), "{s:?} {l:?}");
        assert_eq!(eer(&s, &l).unwrap(), sweep_eer(&s, &l), "{s:?} {l:?}");
    }
}

#[test]
fn roc_endpoints_and_report_round_trip() {
    let s = [0.2, 0.7, 0.7, 0.4, 0.9];
    let l = [0, 1, 0, 0, 1];
    let roc = roc_curve(&s, &l).unwrap();
    assert_eq!(roc.first(), Some(&[0.0, 0.0]));
    assert_eq!(roc.last(), Some(&[1.0, 1.0]));
    let r = MetricsReport::compute(&s, &l, &[0, 1, 1, 0, 1], "beta", "test").unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
    for key in ["auc", "eer", "acc", "n", "domain", "split"] {
        assert!(json.contains(&format!("\"{key}\"")));
    }
}

fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(0u8..2, n),
        )
    })
    .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_maps((s, l) in arb_case()) {
        let base = auc(&s, &l).unwrap();
        let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let a: Vec<f64> = s.iter().map(|x| 3.0 * x + 7.0).collect();
        prop_assert_eq!(auc(&e, &l).unwrap(), base);
        prop_assert_eq!(auc(&a, &l).unwrap(), base);
    }

    #[test]
    fn auc_complements_under_label_flip((s, l) in arb_case()) {
        let mut d = s.clone();
        d.sort_by(f64::total_cmp);
        d.dedup();
        prop_assume!(d.len() == s.len());
        let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        let sum = auc(&s, &l).unwrap() + auc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eer_is_symmetric_under_negation_and_flip((s, l) in arb_case()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        let a = eer(&s, &l).unwrap();
        let b = eer(&neg, &flipped).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn report_fields_are_in_range((s, l) in arb_case()) {
        let pred: Vec<u8> = s.iter().map(|&x| u8::from(x > 0.0)).collect();
        let r = MetricsReport::compute(&s, &l, &pred, "alpha", "test").unwrap();
        prop_assert!((0.0..=1.0).contains(&r.auc));
        prop_assert!((0.0..=1.0).contains(&r.acc));
        prop_assert!((0.0..=1.0).contains(&r.eer));
    }
}

use super::perturb::{gaussian_blur, jpeg_like};
use super::*;
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::new()
}

fn style(name: &str) -> DomainStyle {
    DomainStyle::builtin(name).unwrap()
}

#[test]
fn same_seed_same_pair() {
    let v = vocab();
    for name in DomainStyle::BUILTIN {
        let a = generate_pair(42, &style(name), None, &v).unwrap();
        let b = generate_pair(42, &style(name), None, &v).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn unknown_style_is_config_error() {
    assert!(matches!(DomainStyle::builtin("epsilon"), Err(Error::Config(_))));
}

#[test]
fn real_pairs_are_clean() {
    let v = vocab();
    for seed in 0..50 {
        let (pair, ann) = generate_pair(seed, &style("alpha"), Some(ManipulationKind::None), &v).unwrap();
        assert_eq!(pair.label, 0);
        assert!(ann.mask.is_none() && ann.bbox.is_none() && ann.flipped_tokens.is_empty());
    }
}

#[test]
fn swap_box_is_tight_box_of_mask() {
    let v = vocab();
    for seed in 0..200 {
        let (pair, ann) =
            generate_pair(seed, &style("gamma"), Some(ManipulationKind::ImageSwap), &v).unwrap();
        let mask = ann.mask.as_ref().unwrap();
        assert!(mask.iter().any(|&m| m == 1));
        // Independent recomputation of the tight box.
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (i, &m) in mask.iter().enumerate() {
            if m == 1 {
                xs.push(i % 32);
                ys.push(i / 32);
            }
        }
        let expect = BBox::new(
            *xs.iter().min().unwrap() as f32 / 32.0,
            *ys.iter().min().unwrap() as f32 / 32.0,
            (*xs.iter().max().unwrap() + 1) as f32 / 32.0,
            (*ys.iter().max().unwrap() + 1) as f32 / 32.0,
        );
        assert_eq!(ann.bbox, Some(expect));
        assert_eq!(pair.label, 1);
        assert!(ann.flipped_tokens.is_empty());
    }
}

#[test]
fn text_flip_uses_absent_antonym() {
    let v = vocab();
    for seed in 0..200 {
        let (real, _) = generate_pair(seed, &style("beta"), Some(ManipulationKind::None), &v).unwrap();
        let (fake, ann) = generate_pair(seed, &style("beta"), Some(ManipulationKind::TextFlip), &v).unwrap();
        assert!(ann.mask.is_none());
        assert_eq!(ann.flipped_tokens.len(), 1);
        let i = ann.flipped_tokens[0];
        let orig = v.word(real.caption[i]).unwrap();
        assert_eq!(v.word(fake.caption[i]), antonym(orig));
        // Same scene, same image.
        assert_eq!(real.image, fake.image);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn label_annotation_consistency(seed in any::<u64>(), s in 0usize..4) {
        let v = vocab();
        let (pair, ann) = generate_pair(seed, &style(DomainStyle::BUILTIN[s]), None, &v).unwrap();
        let has_mask = ann.mask.as_ref().is_some_and(|m| m.iter().any(|&x| x == 1));
        prop_assert_eq!(pair.label == 1, has_mask || !ann.flipped_tokens.is_empty());
        prop_assert_eq!(has_mask, pair.kind.touches_image());
        prop_assert_eq!(!ann.flipped_tokens.is_empty(), pair.kind.touches_text());
        prop_assert!(pair.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        if let (Some(m), Some(b)) = (&ann.mask, ann.bbox) {
            prop_assert_eq!(BBox::of_mask(m, 32, 32), Some(b));
        }
    }
}

#[test]
fn split_counts_and_ids() {
    let v = vocab();
    let s = generate_split(&style("delta"), "train", 10, 10, 7, &v).unwrap();
    assert_eq!(s.len(), 20);
    assert_eq!(s.iter().filter(|x| x.pair.label == 0).count(), 10);
    assert_eq!(s[3].id, "delta-train-000003");
    let kinds: Vec<_> = s[10..13].iter().map(|x| x.pair.kind).collect();
    assert_eq!(kinds, ManipulationKind::FAKE.to_vec());
    let t = generate_split(&style("delta"), "test", 10, 10, 7, &v).unwrap();
    let ids: std::collections::HashSet<_> = s.iter().chain(&t).map(|x| x.id.clone()).collect();
    assert_eq!(ids.len(), 40);
    assert_ne!(s[0].pair.image, t[0].pair.image);
}

#[test]
fn disk_round_trip_and_byte_identical_regeneration() {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    let counts = DatasetCounts::balanced(12, 6);
    build_dataset(dir.path().join("a"), &style("alpha"), counts, 3, &v).unwrap();
    build_dataset(dir.path().join("b"), &style("alpha"), counts, 3, &v).unwrap();
    let ma = std::fs::read(dir.path().join("a/train/manifest.jsonl")).unwrap();
    let mb = std::fs::read(dir.path().join("b/train/manifest.jsonl")).unwrap();
    assert_eq!(ma, mb);
    let first = String::from_utf8(ma).unwrap();
    let line = first.lines().next().unwrap();
    let keys: Vec<&str> = ["id", "image", "mask", "caption", "caption_text", "label", "kind", "bbox", "flipped_tokens", "domain"]
        .to_vec();
    let mut last = 0;
    for k in keys {
        let at = line.find(&format!("\"{k}\":")).unwrap();
        assert!(at >= last, "field {k} out of order");
        last = at;
    }

    let loaded = load_split(dir.path().join("a/train")).unwrap();
    let fresh = generate_split(&style("alpha"), "train", 6, 6, 3, &v).unwrap();
    assert_eq!(loaded, fresh);
}

#[test]
fn corrupt_image_reports_path() {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    build_dataset(dir.path(), &style("beta"), DatasetCounts::balanced(2, 2), 1, &v).unwrap();
    let img = dir.path().join("train/images/beta-train-000000.ppm");
    std::fs::write(&img, b"P6\n32 32\n255\nxx").unwrap();
    let err = load_split(dir.path().join("train")).unwrap_err();
    assert!(err.to_string().contains("beta-train-000000.ppm"));
    let err = load_split(dir.path().join("nope")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn perturb_probability_zero_is_identity() {
    let v = vocab();
    let (pair, _) = generate_pair(5, &style("alpha"), None, &v).unwrap();
    assert_eq!(perturb(&pair.image, 9, &PerturbConfig::none()), pair.image);
    let cfg = PerturbConfig { jpeg_prob: 1.0, blur_prob: 1.0, ..PerturbConfig::default() };
    let a = perturb(&pair.image, 9, &cfg);
    assert_eq!(a, perturb(&pair.image, 9, &cfg));
    assert_ne!(a, pair.image);
    assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
}

#[test]
fn tiny_sigma_blur_is_identity() {
    let v = vocab();
    let (pair, _) = generate_pair(6, &style("gamma"), None, &v).unwrap();
    let b = gaussian_blur(&pair.image, 1e-3);
    assert!(b.max_abs_diff(&pair.image) < 1e-6);
}

#[test]
fn jpeg_at_full_quality_is_near_lossless() {
    let v = vocab();
    let (pair, _) = generate_pair(8, &style("delta"), None, &v).unwrap();
    let q100 = jpeg_like(&pair.image, 100);
    assert!(q100.max_abs_diff(&pair.image) < 0.02);
    let q10 = jpeg_like(&pair.image, 10);
    assert!(q10.max_abs_diff(&pair.image) > q100.max_abs_diff(&pair.image));
}

fn histogram(img: &Tensor<f32>) -> Vec<f32> {
    let mut h = vec![0.0; 24];
    for px in img.data().chunks(3) {
        for (c, &v) in px.iter().enumerate() {
            h[c * 8 + ((v * 8.0) as usize).min(7)] += 1.0;
        }
    }
    let n = (img.numel() / 3) as f32;
    h.iter().map(|x| x / n).collect()
}

#[test]
fn color_histograms_separate_styles() {
    let v = vocab();
    for (a, b) in [("alpha", "beta"), ("gamma", "delta"), ("alpha", "gamma")] {
        let train_a = generate_split(&style(a), "train", 50, 50, 1, &v).unwrap();
        let train_b = generate_split(&style(b), "train", 50, 50, 1, &v).unwrap();
        let centroid = |s: &[Sample]| {
            let mut c = vec![0.0; 24];
            for x in s {
                for (ci, hi) in c.iter_mut().zip(histogram(&x.pair.image)) {
                    *ci += hi / s.len() as f32;
                }
            }
            c
        };
        let (ca, cb) = (centroid(&train_a), centroid(&train_b));
        let dist = |h: &[f32], c: &[f32]| h.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
        let test_a = generate_split(&style(a), "test", 50, 50, 1, &v).unwrap();
        let test_b = generate_split(&style(b), "test", 50, 50, 1, &v).unwrap();
        let mut correct = 0;
        for x in &test_a {
            let h = histogram(&x.pair.image);
            correct += usize::from(dist(&h, &ca) < dist(&h, &cb));
        }
        for x in &test_b {
            let h = histogram(&x.pair.image);
            correct += usize::from(dist(&h, &cb) < dist(&h, &ca));
        }
        let acc = correct as f32 / 200.0;
        assert!(acc >= 0.9, "{a} vs {b}: histogram accuracy {acc}");
    }
}

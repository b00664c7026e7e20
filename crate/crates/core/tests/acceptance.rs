//! Acceptance criteria. Each test prints one PASS/FAIL line and asserts it.
//! Criteria 4 to 6 share one desk-scale training run of the module grid.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use forgery_knowledge::artifact::segmentation_map;
use forgery_knowledge::config::TrainConfig;
use forgery_knowledge::losses::{cross_entropy, dice_from_probs, dice_loss, focal_loss, giou_loss, FOCAL_GAMMA};
use forgery_knowledge::metrics::{auc, eer};
use forgery_knowledge::model::{ModuleToggles, FROZEN_PREFIXES};
use forgery_knowledge::params::{Binder, ParamStore};
use forgery_knowledge::synth::{build_dataset, generate_split, DatasetCounts, DomainStyle, Sample};
use forgery_knowledge::tensor::{grad_check, Tape, Tensor};
use forgery_knowledge::train::{
    changed_parameters, evaluate_samples, load_checkpoint, prepare_backbone, sidecar_paths, train, train_samples,
    LocalizationReport, Trained, Variant,
};
use forgery_knowledge::vocab::Vocab;
use forgery_knowledge::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x1, y1) = (rng.random_range(0.0..0.5f32), rng.random_range(0.0..0.5f32));
    BBox::new(x1, y1, x1 + rng.random_range(0.1..0.5), y1 + rng.random_range(0.1..0.5))
}

fn mask_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| f32::from(rng.random_bool(0.4))).collect()
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checks = 0;
    for point in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let mask = mask_for(&mut rng, 6);
        let target = random_box(&mut rng);
        let pred = {
            let b = random_box(&mut rng);
            Tensor::new([1, 4], b.to_array().iter().map(|&v| v as f64).collect()).unwrap()
        };
        let cases: Vec<(&str, Vec<Tensor<f64>>)> = vec![
            ("attention", vec![random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4])]),
            (
                "multi_head_attention",
                vec![
                    random(&mut rng, &[3, 8]),
                    random(&mut rng, &[5, 8]),
                    random(&mut rng, &[5, 8]),
                    random(&mut rng, &[8, 8]),
                    random(&mut rng, &[8]),
                ],
            ),
            ("conv_transpose2d", vec![random(&mut rng, &[2, 2, 3]), random(&mut rng, &[3, 2, 2, 2])]),
            ("linear", vec![random(&mut rng, &[3, 5]), random(&mut rng, &[5, 4]), random(&mut rng, &[4])]),
            ("layer_norm", vec![random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])]),
            ("focal", vec![random(&mut rng, &[6, 2])]),
            ("dice", vec![random(&mut rng, &[6, 2])]),
            ("giou", vec![pred.clone()]),
            ("cross_entropy", vec![random(&mut rng, &[4, 5])]),
            ("log_softmax", vec![random(&mut rng, &[4, 5])]),
        ];
        for (name, inputs) in cases {
            let mask = &mask;
            let r = grad_check(
                |t: &mut Tape<f64>, v| match name {
                    "attention" => t.attention(v[0], v[1], v[2], false),
                    "multi_head_attention" => t.multi_head_attention(v[0], v[1], v[2], 2, false, Some((v[3], Some(v[4])))),
                    "conv_transpose2d" => t.conv_transpose2d(v[0], v[1], 2),
                    "linear" => {
                        let y = t.matmul(v[0], v[1])?;
                        t.add_row(y, v[2])
                    }
                    "layer_norm" => t.layer_norm(v[0], v[1], v[2], 1e-5),
                    "focal" => {
                        let m = t.log_softmax(v[0], 1)?;
                        focal_loss(t, m, mask, FOCAL_GAMMA)
                    }
                    "dice" => {
                        let m = t.log_softmax(v[0], 1)?;
                        dice_loss(t, m, mask)
                    }
                    "giou" => giou_loss(t, v[0], target),
                    "cross_entropy" => cross_entropy(t, v[0], &[0, 3, 1, 4]),
                    _ => t.log_softmax(v[0], 1),
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            checks += 1;
            if r.max_relative_error > worst.0 {
                worst = (r.max_relative_error, name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient integrity",
        worst.0 < 1e-4 && secs < 60.0,
        format!("{checks} checks, max relative error {:.2e} ({}) < 1e-4, {secs:.2} s < 60 s", worst.0, worst.1),
    );
}

#[test]
fn criterion_2_loss_analytics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut focal_gap = 0.0f64;
    let mut norm_gap = 0.0f64;
    for _ in 0..50 {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(random(&mut rng, &[9, 2]));
        let mask = mask_for(&mut rng, 9);
        let targets: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
        let m_s = t.log_softmax(logits, 1).unwrap();
        let f = focal_loss(&mut t, m_s, &mask, 0.0).unwrap();
        let ce = cross_entropy(&mut t, logits, &targets).unwrap();
        focal_gap = focal_gap.max((t.scalar_value(f) - t.scalar_value(ce)).abs());
    }
    for _ in 0..20 {
        let store = ParamStore::new();
        let mut b = Binder::new(&store, false);
        let w = b.constant(Tensor::new([16, 2], (0..32).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap());
        let m_s = segmentation_map(&mut b, w).unwrap();
        let v = b.tape.value(m_s);
        for r in 0..16 {
            let s: f64 = v.row(r).iter().map(|&x| (x as f64).exp()).sum();
            norm_gap = norm_gap.max((s - 1.0).abs());
        }
    }
    let mut t = Tape::<f64>::new();
    let mask = [1.0f32, 0.0, 1.0, 1.0, 0.0];
    let exact = t.constant(Tensor::new([5, 1], mask.iter().map(|&m| m as f64).collect()).unwrap());
    let dice = dice_from_probs(&mut t, exact, &mask, 1.0).unwrap();
    let dice = t.scalar_value(dice);

    let giou_of = |t: &mut Tape<f64>, a: BBox, b: BBox| {
        let p = t.constant(Tensor::new([1, 4], a.to_array().iter().map(|&v| v as f64).collect()).unwrap());
        let g = giou_loss(t, p, b).unwrap();
        t.scalar_value(g)
    };
    let mut identical_zero = true;
    let mut distinct_positive = true;
    for _ in 0..200 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        identical_zero &= giou_of(&mut t, a, a) == 0.0;
        distinct_positive &= a == b || giou_of(&mut t, a, b) > 0.0;
    }
    let half = giou_of(&mut t, BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(0.0, 0.0, 0.5, 1.0));
    let pass = focal_gap <= 1e-6 && dice == 0.0 && identical_zero && distinct_positive && (half - 0.5).abs() < 1e-12 && norm_gap <= 1e-5;
    report(
        2,
        "loss analytics",
        pass,
        format!(
            "|focal(γ=0) - CE| {focal_gap:.1e} ≤ 1e-6, dice(exact) {dice}, giou identical = 0: {identical_zero}, \
             distinct > 0: {distinct_positive}, half overlap {half}, |Σ exp(M_s) - 1| {norm_gap:.1e} ≤ 1e-5"
        ),
    );
}

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
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
    thresholds.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
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
            return pfar + (-dp / (d - dp)) * (far - pfar);
        }
    }
    unreachable!("the last threshold accepts everything")
}

#[test]
fn criterion_3_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut auc_ok, mut eer_ok, mut mono_ok) = (0, 0, 0);
    let total = 1000;
    for _ in 0..total {
        let (scores, labels) = loop {
            let n = rng.random_range(2..=12);
            let levels = rng.random_range(2..=8);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if l.contains(&0) && l.contains(&1) {
                break (s, l);
            }
        };
        let a = auc(&scores, &labels).unwrap();
        auc_ok += usize::from(a == pair_count_auc(&scores, &labels));
        eer_ok += usize::from(eer(&scores, &labels).unwrap() == sweep_eer(&scores, &labels));
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
        mono_ok += usize::from(auc(&exp, &labels).unwrap() == a && auc(&affine, &labels).unwrap() == a);
    }
    report(
        3,
        "metric oracles",
        auc_ok == total && eer_ok == total && mono_ok == total,
        format!("auc exact {auc_ok}/{total}, eer exact {eer_ok}/{total}, monotone invariance {mono_ok}/{total}"),
    );
}

struct DeskRun {
    rows: Vec<(String, f64, Vec<f64>)>,
    full: Trained,
    localization: LocalizationReport,
    minutes: f64,
}

const HELD_OUT: [&str; 3] = ["beta", "gamma", "delta"];

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = TrainConfig::default();
        let vocab = Vocab::new();
        let split = |name: &str, split: &str, n: usize| -> Vec<Sample> {
            let style = DomainStyle::builtin(name).unwrap();
            generate_split(&style, split, n / 2, n - n / 2, cfg.seed, &vocab).unwrap()
        };
        let train = split("alpha", "train", 2000);
        let own_test = split("alpha", "test", 500);
        let tests: Vec<(String, Vec<Sample>)> = HELD_OUT.iter().map(|d| (d.to_string(), split(d, "test", 500))).collect();
        let (backbone, _) = prepare_backbone(&cfg).unwrap();
        let mut rows = Vec::new();
        let mut full = None;
        for v in Variant::module_grid() {
            let run_cfg = TrainConfig { toggles: v.toggles, ..cfg.clone() };
            let trained = train_samples(&run_cfg, &train, Some(&backbone), |_| Ok(())).unwrap();
            let aucs: Vec<f64> = tests
                .iter()
                .map(|(d, s)| evaluate_samples(&trained.model, &trained.store, s, d, "test").unwrap().report.auc)
                .collect();
            let avg = aucs.iter().sum::<f64>() / aucs.len() as f64;
            println!("  {:<14} held-out auc {avg:.4} {aucs:.4?}", v.name);
            rows.push((v.name.clone(), avg, aucs));
            if v.toggles == ModuleToggles::default() {
                full = Some(trained);
            }
        }
        let full = full.expect("module grid contains the full model");
        let localization = evaluate_samples(&full.model, &full.store, &own_test, "alpha", "test")
            .unwrap()
            .localization
            .expect("full model localizes");
        DeskRun {
            rows,
            full,
            localization,
            minutes: start.elapsed().as_secs_f64() / 60.0,
        }
    })
}

#[test]
fn criterion_4_freeze_and_flow() {
    let run = desk_run();
    let changed = changed_parameters(&run.full.initial, &run.full.store);
    let frozen_changed: Vec<&String> = changed
        .iter()
        .filter(|n| FROZEN_PREFIXES.iter().any(|p| n.starts_with(p)))
        .collect();
    let frozen_total = run.full.store.iter().filter(|(_, p)| FROZEN_PREFIXES.iter().any(|f| p.name.starts_with(f))).count();
    let mass = |prefix: &str| -> f64 {
        run.full.grad_mass.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, m)| m).sum()
    };
    let groups = [
        "soft_prompt",
        "cross_modal.",
        "artifact.",
        "projector.semantic",
        "projector.map",
        "projector.token",
    ];
    let masses: Vec<String> = groups.iter().map(|g| format!("{g} {:.3e}", mass(g))).collect();
    let flow = groups.iter().all(|g| mass(g) > 0.0);
    report(
        4,
        "freeze and flow",
        frozen_changed.is_empty() && frozen_total > 0 && flow,
        format!(
            "{} of {frozen_total} frozen tensors changed; accumulated |grad|: {}",
            frozen_changed.len(),
            masses.join(", ")
        ),
    );
}

#[test]
fn criterion_5_directional_ablation() {
    let run = desk_run();
    let avg = |name: &str| run.rows.iter().find(|r| r.0 == name).map(|r| r.1).unwrap();
    let (base, cross, art, full) = (avg("baseline"), avg("+cross_modal"), avg("+artifact"), avg("full"));
    let pass = full > cross && full > art && art > base && full - base >= 0.10;
    report(
        5,
        "directional ablation",
        pass,
        format!(
            "held-out avg AUC full {full:.4} > +cross_modal {cross:.4}, full > +artifact {art:.4} > baseline {base:.4}, \
             full - baseline {:.4} ≥ 0.10 ({:.1} min on one core)",
            full - base,
            run.minutes
        ),
    );
}

#[test]
fn criterion_6_localization() {
    let loc = desk_run().localization;
    report(
        6,
        "localization competence",
        loc.pixel_accuracy >= 0.90 && loc.mean_iou >= 0.5,
        format!(
            "pixel accuracy {:.4} ≥ 0.90, mean IoU {:.4} ≥ 0.5 on {} held-out edited alpha images",
            loc.pixel_accuracy, loc.mean_iou, loc.n
        ),
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let tmp = tempfile::tempdir().unwrap();
    let vocab = Vocab::new();
    let style = DomainStyle::builtin("gamma").unwrap();
    let counts = DatasetCounts::balanced(24, 12);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    build_dataset(&a, &style, counts, 5, &vocab).unwrap();
    build_dataset(&b, &style, counts, 5, &vocab).unwrap();
    let (files_a, files_b) = (dir_bytes(&a), dir_bytes(&b));
    let data_same = files_a == files_b && !files_a.is_empty();

    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.warm_start.scenes = 64;
    cfg.data.train = a.clone();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let runs: Vec<(Vec<u8>, String)> = ["run1", "run2"]
        .iter()
        .map(|name| {
            let ckpt = tmp.path().join(format!("{name}.fkao"));
            pool.install(|| {
                train(&cfg, &ckpt).unwrap();
                let eval = forgery_knowledge::train::evaluate(&ckpt, &a).unwrap();
                (std::fs::read(&ckpt).unwrap(), serde_json::to_string(&eval.report).unwrap())
            })
        })
        .collect();
    let ckpt_same = runs[0].0 == runs[1].0;
    let report_same = runs[0].1 == runs[1].1;

    let ckpt = tmp.path().join("run1.fkao");
    let (_, _, store) = load_checkpoint(&ckpt).unwrap();
    let round_trip = store.to_checkpoint_bytes() == runs[0].0 && sidecar_paths(&ckpt).1.exists();
    report(
        7,
        "determinism and persistence",
        data_same && ckpt_same && report_same && round_trip,
        format!(
            "dataset regeneration identical: {data_same} ({} files), checkpoints identical: {ckpt_same}, \
             reports identical: {report_same}, checkpoint round trip exact: {round_trip}",
            files_a.len()
        ),
    );
}

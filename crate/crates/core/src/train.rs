//! Training loop, evaluation, checkpoints, and the cross-domain and
//! ablation experiment runners.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, PixelTarget};
use crate::metrics::MetricsReport;
use crate::model::{ForgeryModel, FrozenFeatures, Inference, ModuleToggles, FROZEN_PREFIXES};
use crate::optim::{AdamW, Schedule};
use crate::params::{read_checkpoint, Binder, Grads, ParamStore};
use crate::synth::{item_seed, load_split, perturb, Sample};
use crate::warmstart::{copy_by_prefix, warm_start_backbone, WarmStartReport};

/// Segmentation masks are the image mask max-pooled by this factor.
pub const SEG_FACTOR: usize = 2;

const SHUFFLE_SALT: u64 = 0x7368_7566;
const PERTURB_SALT: u64 = 0x7065_7274;

/// One optimizer step in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: ForgeryModel,
    /// Parameters after the last step.
    pub store: ParamStore,
    /// Parameters at the end of the epoch with the lowest mean training loss.
    pub best: ParamStore,
    /// Parameters before the first step, after the backbone warm start.
    pub initial: ParamStore,
    /// Sum over all steps of `|∂L/∂θ|`, per parameter name.
    pub grad_mass: BTreeMap<String, f64>,
    pub epoch_losses: Vec<f32>,
    pub warm_start: Option<WarmStartReport>,
}

/// Builds the backbone (encoders + LM) and warm-starts it. The result is
/// shared by every model variant built from the same seed and model config.
pub fn prepare_backbone(cfg: &TrainConfig) -> Result<(ParamStore, WarmStartReport)> {
    let off = ModuleToggles {
        cross_modal: false,
        artifact: false,
        soft_prompt: false,
        answer_heuristics: true,
    };
    let (model, mut store) = ForgeryModel::new(cfg.model.clone(), off, cfg.seed)?;
    let report = warm_start_backbone(&model, &mut store, &cfg.warm_start, cfg.seed)?;
    Ok((store, report))
}

fn build(cfg: &TrainConfig, backbone: &ParamStore) -> Result<(ForgeryModel, ParamStore)> {
    let (model, mut store) = ForgeryModel::new(cfg.model.clone(), cfg.toggles, cfg.seed)?;
    for p in FROZEN_PREFIXES {
        copy_by_prefix(&mut store, backbone, p)?;
    }
    ForgeryModel::freeze_backbone(&mut store);
    Ok((model, store))
}

/// Encodes every sample's clean image and caption with the frozen encoders.
pub fn encode_all(model: &ForgeryModel, store: &ParamStore, samples: &[Sample]) -> Result<Vec<FrozenFeatures>> {
    samples
        .par_iter()
        .map(|s| model.encode_frozen(store, &s.pair.image, &s.pair.caption))
        .collect()
}

/// Trains one model variant on in-memory samples. The backbone is
/// warm-started when not supplied. `on_step` receives every step's log line.
pub fn train_samples(
    cfg: &TrainConfig,
    samples: &[Sample],
    backbone: Option<&ParamStore>,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut warm_start = None;
    let owned;
    let backbone = match backbone {
        Some(b) => b,
        None => {
            let (s, r) = prepare_backbone(cfg)?;
            warm_start = Some(r);
            owned = s;
            &owned
        }
    };
    let (model, mut store) = build(cfg, backbone)?;
    let initial = store.clone();
    let f_p = model.class_prompt_features(&store)?;
    let clean = encode_all(&model, &store, samples)?;
    let masks: Vec<Vec<f32>> = samples.iter().map(|s| s.seg_mask(SEG_FACTOR)).collect();

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg.optimizer.lr, cfg.epochs * steps_per_epoch, cfg.warmup_fraction);
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let mut grads = Grads::zeros_like(&store);
    let mut grad_mass = vec![0.0f64; store.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, SHUFFLE_SALT, 0));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut best, mut best_loss) = (store.clone(), f32::INFINITY);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut parts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &samples[i];
                let seed = item_seed(cfg.seed, PERTURB_SALT, (epoch * samples.len() + i) as u64);
                let image = perturb(&sample.pair.image, seed, &cfg.perturb);
                let fresh;
                let feats = if image == sample.pair.image {
                    &clean[i]
                } else {
                    fresh = model.encode_frozen(&store, &image, &sample.pair.caption)?;
                    &fresh
                };
                let mut bind = Binder::new(&store, true);
                let out = model.forward(&mut bind, feats, &f_p)?;
                let edited = sample.pair.kind.touches_image();
                let artifact = out.artifact.map(|a| {
                    let target = PixelTarget {
                        mask: cfg.losses.pixel.then_some(&masks[i][..]),
                        bbox: sample.ann.bbox.filter(|_| cfg.losses.patch && edited),
                    };
                    (a.m_s, a.bbox, target)
                });
                let answer = model.layout.target(sample.pair.label);
                let (total, bd) = total_loss(&mut bind.tape, out.answer_logits, answer, artifact)?;
                if let Some((component, value)) = bd.non_finite() {
                    return Err(Error::Diverged { step, component, value });
                }
                bind.tape.backward(total)?;
                bind.accumulate(&mut grads, 1.0 / chunk.len() as f32);
                epoch_sum += bd.total as f64;
                parts.push(bd);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    component: "gradient",
                    value: f32::NAN,
                });
            }
            for (id, _) in store.iter() {
                grad_mass[id.index()] += grads.get(id).iter().map(|g| g.abs() as f64).sum::<f64>();
            }
            let lr = schedule.lr(step);
            opt.step(&mut store, &grads, lr);
            on_step(&StepLog {
                step,
                epoch,
                lr,
                loss: LossBreakdown::mean(&parts),
            })?;
            step += 1;
        }
        let mean = (epoch_sum / samples.len() as f64) as f32;
        epoch_losses.push(mean);
        if mean < best_loss {
            best_loss = mean;
            best = store.clone();
        }
    }
    let grad_mass = store
        .iter()
        .map(|(id, p)| (p.name.clone(), grad_mass[id.index()]))
        .collect();
    Ok(Trained {
        model,
        store,
        best,
        initial,
        grad_mass,
        epoch_losses,
        warm_start,
    })
}

/// Paths written next to a checkpoint.
pub fn sidecar_paths(ckpt: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".best"), with(".config.toml"), with(".log.jsonl"))
}

/// Trains from `cfg.data.train/train`, writing the final checkpoint to
/// `out`, the best one to `<out>.best`, the config to `<out>.config.toml`
/// and the step log to `<out>.log.jsonl`.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<Trained> {
    cfg.validate()?;
    let samples = load_split(cfg.data.train.join("train"))?;
    let (best_path, cfg_path, log_path) = sidecar_paths(out);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let trained = train_samples(cfg, &samples, None, |line| {
        let text = serde_json::to_string(line).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log, "{text}").map_err(|e| Error::io(&log_path, e))
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trained.store.save(out)?;
    trained.best.save(&best_path)?;
    cfg.save(&cfg_path)?;
    Ok(trained)
}

/// Rebuilds the model described by `<ckpt>.config.toml` and loads the weights.
pub fn load_checkpoint(ckpt: &Path) -> Result<(TrainConfig, ForgeryModel, ParamStore)> {
    let (_, cfg_path, _) = sidecar_paths(ckpt);
    let cfg = TrainConfig::load(&cfg_path)?;
    let (model, mut store) = ForgeryModel::new(cfg.model.clone(), cfg.toggles, cfg.seed)?;
    store.load_values(read_checkpoint(ckpt)?)?;
    ForgeryModel::freeze_backbone(&mut store);
    Ok((cfg, model, store))
}

/// Box and mask quality on samples with an edited image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Fraction of segmentation pixels where `argmax(M_s)` matches the mask.
    pub pixel_accuracy: f64,
    /// Mean IoU of the predicted and annotated boxes.
    pub mean_iou: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub localization: Option<LocalizationReport>,
    pub outputs: Vec<Inference>,
}

/// Read-only inference over `samples`, parallel across samples.
pub fn evaluate_samples(
    model: &ForgeryModel,
    store: &ParamStore,
    samples: &[Sample],
    domain: &str,
    split: &str,
) -> Result<Evaluation> {
    let f_p = model.class_prompt_features(store)?;
    let outputs: Vec<Inference> = samples
        .par_iter()
        .map(|s| {
            let feats = model.encode_frozen(store, &s.pair.image, &s.pair.caption)?;
            model.infer(store, &feats, &f_p)
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = outputs.iter().map(|o| o.prediction.score).collect();
    let predicted: Vec<u8> = outputs.iter().map(|o| o.prediction.label).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.pair.label).collect();
    let report = MetricsReport::compute(&scores, &labels, &predicted, domain, split)?;

    let mut hits = 0usize;
    let mut pixels = 0usize;
    let mut ious = Vec::new();
    for (s, o) in samples.iter().zip(&outputs) {
        let (Some(seg), Some(bbox), Some(truth)) = (&o.seg, o.bbox, s.ann.bbox) else {
            continue;
        };
        if !s.pair.kind.touches_image() {
            continue;
        }
        let mask = s.seg_mask(SEG_FACTOR);
        for (r, &m) in mask.iter().enumerate() {
            let row = seg.row(r);
            let unnatural = row[1] > row[0];
            hits += usize::from(unnatural == (m > 0.5));
        }
        pixels += mask.len();
        ious.push(bbox.iou(truth) as f64);
    }
    let localization = (!ious.is_empty()).then(|| LocalizationReport {
        pixel_accuracy: hits as f64 / pixels as f64,
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        n: ious.len(),
    });
    Ok(Evaluation {
        report,
        localization,
        outputs,
    })
}

/// Evaluates a checkpoint on the `test` split of a dataset directory.
pub fn evaluate(ckpt: &Path, data: &Path) -> Result<Evaluation> {
    let (_, model, store) = load_checkpoint(ckpt)?;
    let samples = load_split(data.join("test"))?;
    let domain = samples
        .first()
        .map(|s| s.pair.domain.clone())
        .ok_or_else(|| Error::Input(format!("{} has no test samples", data.display())))?;
    evaluate_samples(&model, &store, &samples, &domain, "test")
}

/// One row of the cross-domain matrix: the checkpoint evaluated on each dataset.
pub fn cross_domain(ckpt: &Path, datasets: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    datasets
        .iter()
        .map(|d| evaluate(ckpt, d).map(|e| e.report))
        .collect()
}

/// A named toggle setting of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: ModuleToggles,
}

impl Variant {
    fn new(name: &str, cross_modal: bool, artifact: bool, soft_prompt: bool, answer_heuristics: bool) -> Self {
        Variant {
            name: name.into(),
            toggles: ModuleToggles {
                cross_modal,
                artifact,
                soft_prompt,
                answer_heuristics,
            },
        }
    }

    /// Module grid: soft-prompt-only baseline, each knowledge module alone, both.
    pub fn module_grid() -> Vec<Variant> {
        vec![
            Variant::new("baseline", false, false, true, true),
            Variant::new("+cross_modal", true, false, true, true),
            Variant::new("+artifact", false, true, true, true),
            Variant::new("full", true, true, true, true),
        ]
    }

    /// Prompt-strategy grid: without soft prompts, without answer
    /// heuristics, without both, and the full model.
    pub fn prompt_grid() -> Vec<Variant> {
        vec![
            Variant::new("-SPT", true, true, false, true),
            Variant::new("-CAH", true, true, true, false),
            Variant::new("-both", true, true, false, false),
            Variant::new("full", true, true, true, true),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub toggles: ModuleToggles,
    pub reports: Vec<MetricsReport>,
    pub average_auc: f64,
    pub average_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub modules: Vec<AblationRow>,
    pub prompts: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.modules.iter().chain(&self.prompts).find(|r| r.variant == variant)
    }

    /// Plain-text table, one line per variant.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [("modules", &self.modules), ("prompts", &self.prompts)] {
            out.push_str(&format!("{title}\n"));
            for r in rows {
                let cells: Vec<String> = r
                    .reports
                    .iter()
                    .map(|m| format!("{} auc {:.4} acc {:.4}", m.domain, m.auc, m.acc))
                    .collect();
                out.push_str(&format!(
                    "  {:<14} avg auc {:.4} avg acc {:.4} | {}\n",
                    r.variant,
                    r.average_auc,
                    r.average_acc,
                    cells.join(" | ")
                ));
            }
        }
        out
    }
}

/// Trains each variant on `train` and evaluates it on every `tests` entry
/// (domain name, samples). The full model is trained once and shared by
/// both grids. `progress` is told when each variant finishes.
pub fn ablate_samples(
    base: &TrainConfig,
    train: &[Sample],
    tests: &[(String, Vec<Sample>)],
    modules: &[Variant],
    prompts: &[Variant],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let (backbone, _) = prepare_backbone(base)?;
    let mut done: BTreeMap<ModuleToggles, AblationRow> = BTreeMap::new();
    let mut run = |v: &Variant| -> Result<AblationRow> {
        if let Some(r) = done.get(&v.toggles) {
            return Ok(AblationRow {
                variant: v.name.clone(),
                ..r.clone()
            });
        }
        let cfg = TrainConfig {
            toggles: v.toggles,
            ..base.clone()
        };
        let trained = train_samples(&cfg, train, Some(&backbone), |_| Ok(()))?;
        let reports = tests
            .iter()
            .map(|(domain, samples)| {
                evaluate_samples(&trained.model, &trained.store, samples, domain, "test").map(|e| e.report)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = reports.len().max(1) as f64;
        let row = AblationRow {
            variant: v.name.clone(),
            toggles: v.toggles,
            average_auc: reports.iter().map(|r| r.auc).sum::<f64>() / n,
            average_acc: reports.iter().map(|r| r.acc).sum::<f64>() / n,
            reports,
        };
        progress(&row);
        done.insert(v.toggles, row.clone());
        Ok(row)
    };
    let modules = modules.iter().map(&mut run).collect::<Result<Vec<_>>>()?;
    let prompts = prompts.iter().map(&mut run).collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { modules, prompts })
}

/// Runs both ablation grids from the datasets named in `base.data` and
/// writes `ablation.json` and `ablation.txt` into `out`.
pub fn ablate(base: &TrainConfig, out: &Path) -> Result<AblationReport> {
    base.validate()?;
    let train = load_split(base.data.train.join("train"))?;
    let tests = base
        .data
        .test
        .iter()
        .map(|d| {
            let samples = load_split(d.join("test"))?;
            let domain = samples.first().map(|s| s.pair.domain.clone()).unwrap_or_default();
            Ok((domain, samples))
        })
        .collect::<Result<Vec<_>>>()?;
    if tests.is_empty() {
        return Err(Error::Config("ablation needs at least one test dataset".into()));
    }
    let report = ablate_samples(base, &train, &tests, &Variant::module_grid(), &Variant::prompt_grid(), |_| {})?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let txt = out.join("ablation.txt");
    std::fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// Names of parameters whose values differ between two stores.
pub fn changed_parameters(before: &ParamStore, after: &ParamStore) -> Vec<String> {
    after
        .iter()
        .filter(|(id, p)| before.value(*id).data() != p.value.data())
        .map(|(_, p)| p.name.clone())
        .collect()
}

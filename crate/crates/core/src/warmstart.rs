//! Self-supervised warm starts for the backbone that is frozen during
//! detector training: image encoder, text encoder, language model.
//!
//! Each stage trains in a scratch copy of the store with its own throwaway
//! heads, then copies the fitted backbone values back by name.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{LayerNorm, Linear};
use crate::encoders::{IMAGE_PREFIX, TEXT_PREFIX};
use crate::error::{Error, Result};
use crate::lm::{AnswerLabel, FeatureSlots, PromptLayout, Slot, SoftPromptPlacement, LM_PREFIX};
use crate::losses::cross_entropy;
use crate::model::{ForgeryModel, FrozenFeatures};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::{Binder, Grads, ParamStore};
use crate::synth::{generate_split, DomainStyle, Sample};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    /// Scenes drawn from the neutral "pretrain" style.
    pub scenes: usize,
    pub image_epochs: usize,
    pub text_epochs: usize,
    pub lm_epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            scenes: 1200,
            image_epochs: 6,
            text_epochs: 8,
            lm_epochs: 8,
            lr: 1e-3,
            batch: 16,
        }
    }
}

/// Mean training loss of the final epoch of each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmStartReport {
    pub image_loss: f32,
    pub text_loss: f32,
    pub lm_loss: f32,
}

/// Minibatch AdamW over `items` with a warmup + cosine schedule; optimizes
/// every trainable parameter of `store`. Returns the last epoch's mean loss.
pub(crate) fn run_epochs<T>(
    store: &mut ParamStore,
    items: &[T],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    mut loss: impl FnMut(&mut Binder, &T, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<f32> {
    if items.is_empty() || epochs == 0 {
        return Ok(0.0);
    }
    let batch = batch.max(1);
    let steps_per_epoch = items.len().div_ceil(batch);
    let schedule = Schedule::new(lr, epochs * steps_per_epoch, 0.1);
    let mut opt = AdamW::new(AdamWConfig { lr, ..AdamWConfig::default() }, store);
    let mut grads = Grads::zeros_like(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    let mut last = 0.0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for chunk in order.chunks(batch) {
            grads.zero();
            for &i in chunk {
                let mut bind = Binder::new(store, true);
                let l = loss(&mut bind, &items[i], &mut rng)?;
                let v = bind.tape.scalar_value(l);
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        component: "warm_start",
                        value: v,
                    });
                }
                sum += v as f64;
                bind.tape.backward(l)?;
                bind.accumulate(&mut grads, 1.0 / chunk.len() as f32);
            }
            opt.step(store, &grads, schedule.lr(step));
            step += 1;
        }
        last = (sum / items.len() as f64) as f32;
    }
    Ok(last)
}

/// Copies every parameter whose name starts with `prefix` from `src` into `dst`.
pub fn copy_by_prefix(dst: &mut ParamStore, src: &ParamStore, prefix: &str) -> Result<()> {
    for (_, p) in src.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        let id = dst
            .find(&p.name)
            .ok_or_else(|| Error::Config(format!("parameter {} missing from target store", p.name)))?;
        if dst.value(id).shape() != p.value.shape() {
            return Err(Error::dim("copy_by_prefix", format!("shape mismatch for {}", p.name)));
        }
        *dst.value_mut(id) = p.value.clone();
    }
    Ok(())
}

fn scratch(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut s = store.clone();
    s.set_trainable("", false);
    s.set_trainable(prefix, true);
    s
}

/// Per-patch regression targets: 2×2-pixel block means (48) and checker
/// energies `|x00 - x01 - x10 + x11| / 4` averaged over channels (16).
pub fn image_targets(pixels: &Tensor<f32>, patch: usize) -> Tensor<f32> {
    let s = pixels.shape()[0];
    let g = s / patch;
    let px = |y: usize, x: usize, c: usize| pixels.data()[(y * s + x) * 3 + c];
    let mut out = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let blocks = patch / 2;
            let mut means = Vec::new();
            let mut checks = Vec::new();
            for by in 0..blocks {
                for bx in 0..blocks {
                    let (y, x) = (gy * patch + by * 2, gx * patch + bx * 2);
                    let mut e = 0.0;
                    for c in 0..3 {
                        let (a, b, cc, d) = (px(y, x, c), px(y, x + 1, c), px(y + 1, x, c), px(y + 1, x + 1, c));
                        means.push((a + b + cc + d) / 4.0);
                        e += (a - b - cc + d).abs() / 4.0;
                    }
                    checks.push(e / 3.0 * 4.0);
                }
            }
            out.extend(means);
            out.extend(checks);
        }
    }
    let width = out.len() / (g * g);
    Tensor::new([g * g, width], out).unwrap()
}

fn mean_rgb(pixels: &Tensor<f32>) -> Tensor<f32> {
    let n = pixels.numel() / 3;
    let mut m = [0.0f32; 3];
    for (i, v) in pixels.data().iter().enumerate() {
        m[i % 3] += v / n as f32;
    }
    Tensor::new([1, 3], m.to_vec()).unwrap()
}

fn squared_error(bind: &mut Binder, pred: Var, target: Tensor<f32>) -> Result<Var> {
    let t = bind.constant(target);
    let d = bind.tape.sub(pred, t)?;
    let sq = bind.tape.mul(d, d)?;
    Ok(bind.tape.mean(sq))
}

/// Fits the image encoder to reconstruct patch statistics from
/// layer-normalized fused patch features, and global color from the fused cls.
pub fn warm_image_encoder(
    model: &ForgeryModel,
    store: &mut ParamStore,
    scenes: &[Sample],
    cfg: &WarmStartConfig,
    seed: u64,
) -> Result<f32> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let mut s = scratch(store, IMAGE_PREFIX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.cfg.image_encoder.dim;
    let patch = model.cfg.image_encoder.patch_size;
    let ln = LayerNorm::new(&mut s, "warm.image.ln", c, true);
    let width = image_targets(&scenes[0].pair.image, patch).shape()[1];
    let head = Linear::new(&mut s, &mut rng, "warm.image.head", c, width, true);
    let cls_head = Linear::new(&mut s, &mut rng, "warm.image.cls", c, 3, true);
    let targets: Vec<(Tensor<f32>, Tensor<f32>)> = scenes
        .iter()
        .map(|x| (image_targets(&x.pair.image, patch), mean_rgb(&x.pair.image)))
        .collect();
    let items: Vec<usize> = (0..scenes.len()).collect();
    let loss = run_epochs(&mut s, &items, cfg.image_epochs, cfg.batch, cfg.lr, seed ^ 1, |bind, &i, _| {
        let enc = model.image_encoder.encode(bind, &scenes[i].pair.image)?;
        let h = ln.forward(bind, enc.fused_patch)?;
        let pred = head.forward(bind, h)?;
        let l_patch = squared_error(bind, pred, targets[i].0.clone())?;
        let g = cls_head.forward(bind, enc.fused_cls)?;
        let l_cls = squared_error(bind, g, targets[i].1.clone())?;
        bind.tape.add(l_patch, l_cls)
    })?;
    copy_by_prefix(store, &s, IMAGE_PREFIX)?;
    Ok(loss)
}

/// Fits the text encoder with masked-token prediction on caption and class
/// prompt text, plus bag-of-words prediction from the cls feature.
pub fn warm_text_encoder(
    model: &ForgeryModel,
    store: &mut ParamStore,
    scenes: &[Sample],
    cfg: &WarmStartConfig,
    seed: u64,
) -> Result<f32> {
    let mut s = scratch(store, TEXT_PREFIX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, v) = (model.cfg.text_encoder.dim, model.vocab.len());
    let token_head = Linear::new(&mut s, &mut rng, "warm.text.token", c, v, true);
    let bag_head = Linear::new(&mut s, &mut rng, "warm.text.bag", c, v, true);
    let mut texts: Vec<Vec<usize>> = scenes.iter().map(|x| x.pair.caption.clone()).collect();
    let prompts = &model.cfg.class_prompts;
    for t in prompts.natural.iter().chain(&prompts.unnatural) {
        let ids = model.vocab.encode(t)?;
        // Class prompts are few; repeat them so they are seen as often as a caption template.
        texts.extend(std::iter::repeat_n(ids, 8));
    }
    let mask_id = model.vocab.mask();
    let loss = run_epochs(&mut s, &texts, cfg.text_epochs, cfg.batch, cfg.lr, seed ^ 2, |bind, ids, rng| {
        let mut masked = ids.clone();
        let mut positions: Vec<usize> = (0..ids.len()).filter(|_| rng.random_bool(0.25)).collect();
        if positions.is_empty() {
            positions.push(rng.random_range(0..ids.len()));
        }
        for &p in &positions {
            masked[p] = mask_id;
        }
        let enc = model.text_encoder.encode(bind, &masked)?;
        let rows: Vec<Var> = positions
            .iter()
            .map(|&p| bind.tape.slice_rows(enc.tokens, p + 1, 1))
            .collect::<Result<_>>()?;
        let rows = bind.tape.concat_rows(&rows)?;
        let logits = token_head.forward(bind, rows)?;
        let targets: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
        let l_tok = cross_entropy(&mut bind.tape, logits, &targets)?;
        let bag = bag_head.forward(bind, enc.cls)?;
        let rep = bind.tape.concat_rows(&vec![bag; ids.len()])?;
        let l_bag = cross_entropy(&mut bind.tape, rep, ids)?;
        bind.tape.add(l_tok, l_bag)
    })?;
    copy_by_prefix(store, &s, TEXT_PREFIX)?;
    Ok(loss)
}

enum LmItem {
    /// Image feature followed by its caption; next-token loss on the caption.
    Caption { image: Tensor<f32>, caption: Vec<usize> },
    /// Instruction template with placeholder tokens in the feature slots.
    Question { layout: usize, answer: AnswerLabel },
}

/// Pretrains the language model and its image projector on image captioning
/// and on the instruction template with placeholder features and random answers.
pub fn warm_language_model(
    model: &ForgeryModel,
    store: &mut ParamStore,
    scenes: &[Sample],
    cfg: &WarmStartConfig,
    seed: u64,
) -> Result<f32> {
    let mut s = scratch(store, LM_PREFIX);
    let vocab = &model.vocab;
    let feat = vocab.feat();
    let mut layouts = Vec::new();
    for heuristics in [true, false] {
        for n_feat in 0..=3 {
            for soft in [0, model.cfg.soft_prompts] {
                let f = FeatureSlots {
                    semantic: n_feat >= 1,
                    map: n_feat >= 2,
                    token: n_feat >= 3,
                    soft,
                };
                let l = PromptLayout::build(
                    vocab,
                    &model.cfg.template,
                    heuristics,
                    1,
                    f,
                    SoftPromptPlacement::BeforeSemantic,
                )?;
                let ids: Vec<usize> = l
                    .slots
                    .iter()
                    .map(|s| match *s {
                        Slot::Token(id) => id,
                        _ => feat,
                    })
                    .collect();
                layouts.push((l, ids));
            }
        }
    }
    let prefix = {
        let t = &model.cfg.template;
        (vocab.encode(&t.human)?, vocab.encode(&t.image_open)?, vocab.encode(&t.image_close)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for x in scenes {
        let feats: FrozenFeatures = model.encode_frozen(store, &x.pair.image, &x.pair.caption)?;
        let image = Tensor::new([1, feats.image.shape()[1]], feats.image.row(0).to_vec())?;
        items.push(LmItem::Caption { image, caption: x.pair.caption.clone() });
        items.push(LmItem::Question {
            layout: rng.random_range(0..layouts.len()),
            answer: if rng.random_bool(0.5) { AnswerLabel::Fake } else { AnswerLabel::Real },
        });
    }
    let loss = run_epochs(&mut s, &items, cfg.lm_epochs, cfg.batch, cfg.lr, seed ^ 3, |bind, item, _| match item {
        LmItem::Caption { image, caption } => {
            let head: Vec<usize> = prefix.0.iter().chain(&prefix.1).copied().collect();
            let a = model.lm.embed(bind, &head)?;
            let img = bind.constant(image.clone());
            let img = model.lm.project_image(bind, img)?;
            let tail: Vec<usize> = prefix.2.iter().chain(caption).copied().collect();
            let b = model.lm.embed(bind, &tail)?;
            let seq = bind.tape.concat_rows(&[a, img, b])?;
            let logits = model.lm.forward(bind, seq)?;
            // Predict each caption token from everything before it.
            let start = head.len() + 1 + prefix.2.len() - 1;
            let rows = bind.tape.slice_rows(logits, start, caption.len())?;
            cross_entropy(&mut bind.tape, rows, caption)
        }
        LmItem::Question { layout, answer } => {
            let (l, ids) = &layouts[*layout];
            let seq = model.lm.embed(bind, ids)?;
            let logits = model.lm.answer_logits(bind, seq)?;
            cross_entropy(&mut bind.tape, logits, &[l.target(answer.label())])
        }
    })?;
    copy_by_prefix(store, &s, LM_PREFIX)?;
    Ok(loss)
}

/// Runs all three stages on scenes of the "pretrain" style and freezes the backbone.
pub fn warm_start_backbone(
    model: &ForgeryModel,
    store: &mut ParamStore,
    cfg: &WarmStartConfig,
    seed: u64,
) -> Result<WarmStartReport> {
    let style = DomainStyle::builtin("pretrain")?;
    let half = cfg.scenes / 2;
    let scenes = generate_split(&style, "warm", cfg.scenes - half, half, seed, &model.vocab)?;
    let image_loss = warm_image_encoder(model, store, &scenes, cfg, seed)?;
    let text_loss = warm_text_encoder(model, store, &scenes, cfg, seed)?;
    let lm_loss = warm_language_model(model, store, &scenes, cfg, seed)?;
    ForgeryModel::freeze_backbone(store);
    Ok(WarmStartReport {
        image_loss,
        text_loss,
        lm_loss,
    })
}

//! The full detector: frozen encoders and language model, forgery-knowledge
//! modules, soft prompts, and the per-sample forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::artifact::{ArtifactConfig, ArtifactModule, ArtifactOutput, ARTIFACT_PREFIX};
use crate::cross_modal::{CrossModal, CROSS_PREFIX, CrossModalConfig, CrossModalOutput, SemanticProjector};
use crate::encoders::{
    encode_class_prompts, ClassPrompts, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig,
    IMAGE_PREFIX, TEXT_PREFIX,
};
use crate::error::{Error, Result};
use crate::lm::{
    predict_answer, FeatureSlots, LmConfig, Prediction, PromptLayout, PromptParts, PromptTemplate,
    SoftPromptPlacement, ToyLm, LM_PREFIX,
};
use crate::params::{Binder, ParamId, ParamStore};
use crate::synth::item_seed;
use crate::tensor::{Tensor, Var};
use crate::vocab::Vocab;

pub const SOFT_PROMPT: &str = "soft_prompt";
pub const PROJECTOR_PREFIX: &str = "projector.";

/// Prefixes of the parameter groups that stay frozen during detector training.
pub const FROZEN_PREFIXES: [&str; 3] = [IMAGE_PREFIX, TEXT_PREFIX, LM_PREFIX];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleToggles {
    pub cross_modal: bool,
    pub artifact: bool,
    pub soft_prompt: bool,
    pub answer_heuristics: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles {
            cross_modal: true,
            artifact: true,
            soft_prompt: true,
            answer_heuristics: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_encoder: ImageEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub cross_modal: CrossModalConfig,
    pub artifact: ArtifactConfig,
    pub lm: LmConfig,
    pub soft_prompts: usize,
    pub soft_prompt_placement: SoftPromptPlacement,
    pub template: PromptTemplate,
    pub class_prompts: ClassPrompts,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_encoder: ImageEncoderConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            cross_modal: CrossModalConfig::default(),
            artifact: ArtifactConfig::default(),
            lm: LmConfig::default(),
            soft_prompts: 4,
            soft_prompt_placement: SoftPromptPlacement::BeforeSemantic,
            template: PromptTemplate::default(),
            class_prompts: ClassPrompts::default(),
        }
    }
}

/// Encoder outputs for one sample. The encoders are frozen, so these are
/// computed once off-tape and enter the trainable graph as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatures {
    /// `(1 + hw) × C_img`: fused cls followed by fused patches.
    pub image: Tensor<f32>,
    /// `(1 + n) × C_text`: cls followed by caption tokens.
    pub text: Tensor<f32>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `1 × V` logits at the assistant position.
    pub answer_logits: Var,
    pub cross: Option<CrossModalOutput>,
    pub artifact: Option<ArtifactOutput>,
}

#[derive(Clone, Debug)]
pub struct ForgeryModel {
    pub cfg: ModelConfig,
    pub toggles: ModuleToggles,
    pub vocab: Vocab,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub lm: ToyLm,
    pub cross: Option<CrossModal>,
    pub semantic: Option<SemanticProjector>,
    pub artifact: Option<ArtifactModule>,
    pub soft: Option<ParamId>,
    pub layout: PromptLayout,
}

/// Each parameter group draws its initialization from its own stream, so
/// shared groups are identical across module toggles.
fn group_rng(seed: u64, group: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(item_seed(seed, 0x6d6f_6465_6c00 + group, 0))
}

impl ForgeryModel {
    /// Builds every enabled group into a fresh store. Encoders and LM start
    /// trainable so warm starts can fit them; [`ForgeryModel::freeze_backbone`]
    /// freezes them.
    pub fn new(cfg: ModelConfig, toggles: ModuleToggles, seed: u64) -> Result<(Self, ParamStore)> {
        let vocab = Vocab::new();
        let mut store = ParamStore::new();
        let image_encoder = ImageEncoder::new(&mut store, &mut group_rng(seed, 0), cfg.image_encoder.clone())?;
        let text_encoder = TextEncoder::new(&mut store, &mut group_rng(seed, 1), cfg.text_encoder.clone(), &vocab)?;
        let (c_img, c_text, c_lm) = (cfg.image_encoder.dim, cfg.text_encoder.dim, cfg.lm.dim);
        let lm = ToyLm::new(&mut store, &mut group_rng(seed, 2), cfg.lm.clone(), &vocab, c_img)?;

        let (cross, semantic) = if toggles.cross_modal {
            let mut rng = group_rng(seed, 3);
            let cross = CrossModal::new(&mut store, &mut rng, cfg.cross_modal.clone(), c_img, c_text)?;
            let sem = SemanticProjector::new(&mut store, &mut rng, cfg.cross_modal.dim, c_lm);
            (Some(cross), Some(sem))
        } else {
            (None, None)
        };
        let artifact = if toggles.artifact {
            let d_in = if toggles.cross_modal { cfg.cross_modal.dim } else { c_img };
            Some(ArtifactModule::new(
                &mut store,
                &mut group_rng(seed, 4),
                cfg.artifact.clone(),
                d_in,
                c_text,
                c_lm,
                cfg.image_encoder.grid(),
            )?)
        } else {
            None
        };
        let n_soft = if toggles.soft_prompt { cfg.soft_prompts } else { 0 };
        let soft = (n_soft > 0).then(|| store.uniform(&mut group_rng(seed, 5), SOFT_PROMPT, &[n_soft, c_lm], true));

        let features = FeatureSlots {
            semantic: toggles.cross_modal,
            map: toggles.artifact,
            token: toggles.artifact,
            soft: n_soft,
        };
        let layout = PromptLayout::build(
            &vocab,
            &cfg.template,
            toggles.answer_heuristics,
            1,
            features,
            cfg.soft_prompt_placement,
        )?;
        if layout.len() > cfg.lm.max_len {
            return Err(Error::Config(format!(
                "prompt of {} positions exceeds lm max_len {}",
                layout.len(),
                cfg.lm.max_len
            )));
        }
        let model = ForgeryModel {
            cfg,
            toggles,
            vocab,
            image_encoder,
            text_encoder,
            lm,
            cross,
            semantic,
            artifact,
            soft,
            layout,
        };
        Ok((model, store))
    }

    pub fn freeze_backbone(store: &mut ParamStore) {
        for p in FROZEN_PREFIXES {
            store.set_trainable(p, false);
        }
    }

    /// Ids the optimizer updates: cross-modal adapters and attention, the
    /// artifact branch, the three forgery projectors and the soft prompts.
    pub fn trainable_parameters(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .trainable_ids()
            .into_iter()
            .filter(|&id| {
                let name = &store.get(id).name;
                [CROSS_PREFIX, ARTIFACT_PREFIX, PROJECTOR_PREFIX, SOFT_PROMPT]
                    .iter()
                    .any(|p| name.starts_with(p))
            })
            .collect()
    }

    pub fn encode_frozen(&self, store: &ParamStore, pixels: &Tensor<f32>, caption: &[usize]) -> Result<FrozenFeatures> {
        let mut bind = Binder::new(store, false);
        let img = self.image_encoder.encode(&mut bind, pixels)?;
        let image = bind.tape.concat_rows(&[img.fused_cls, img.fused_patch])?;
        let text = self.text_encoder.encode(&mut bind, caption)?.tokens;
        Ok(FrozenFeatures {
            image: bind.tape.value(image).clone(),
            text: bind.tape.value(text).clone(),
        })
    }

    /// `2 × C_text` natural/unnatural class-prompt features.
    pub fn class_prompt_features(&self, store: &ParamStore) -> Result<Tensor<f32>> {
        let mut bind = Binder::new(store, false);
        let fp = encode_class_prompts(&mut bind, &self.text_encoder, &self.vocab, &self.cfg.class_prompts)?;
        Ok(bind.tape.value(fp).clone())
    }

    pub fn forward(&self, bind: &mut Binder, feats: &FrozenFeatures, f_p: &Tensor<f32>) -> Result<ForwardOutput> {
        let f_v = bind.constant(feats.image.clone());
        let f_t = bind.constant(feats.text.clone());
        let hw = feats.image.shape()[0] - 1;
        let cls = bind.tape.slice_rows(f_v, 0, 1)?;
        let image = self.lm.project_image(bind, cls)?;

        let mut parts = PromptParts {
            image: Some(image),
            ..Default::default()
        };
        let cross = match (&self.cross, &self.semantic) {
            (Some(cm), Some(sem)) => {
                let out = cm.forward(bind, f_v, f_t)?;
                parts.semantic = Some(sem.forward(bind, out.u_v_cls, out.u_t_cls)?);
                Some(out)
            }
            _ => None,
        };
        let artifact = match &self.artifact {
            Some(art) => {
                let u_pat = match &cross {
                    Some(out) => out.u_v_pat,
                    None => bind.tape.slice_rows(f_v, 1, hw)?,
                };
                let fp = bind.constant(f_p.clone());
                let out = art.forward(bind, u_pat, fp)?;
                parts.map = Some(out.map_embedding);
                parts.token = Some(out.token_embedding);
                Some(out)
            }
            None => None,
        };
        parts.soft = self.soft.map(|id| bind.p(id));
        let seq = self.lm.assemble_prompt(bind, &self.layout, &parts)?;
        let answer_logits = self.lm.answer_logits(bind, seq)?;
        Ok(ForwardOutput {
            answer_logits,
            cross,
            artifact,
        })
    }

    /// Answer prediction plus the artifact branch outputs when enabled.
    pub fn infer(&self, store: &ParamStore, feats: &FrozenFeatures, f_p: &Tensor<f32>) -> Result<Inference> {
        let mut bind = Binder::new(store, false);
        let out = self.forward(&mut bind, feats, f_p)?;
        let prediction = predict_answer(bind.tape.value(out.answer_logits).data(), &self.layout)?;
        let (seg, bbox) = match out.artifact {
            Some(a) => {
                let b = bind.tape.value(a.bbox).data();
                (
                    Some(bind.tape.value(a.m_s).clone()),
                    Some(BBox::new(b[0], b[1], b[2], b[3])),
                )
            }
            None => (None, None),
        };
        Ok(Inference { prediction, seg, bbox })
    }
}

/// Read-only outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    /// `(H·W) × 2` segmentation log-probabilities.
    pub seg: Option<Tensor<f32>>,
    pub bbox: Option<BBox>,
}

//! Small transformer image and text encoders with multi-level image taps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// 1-based block indices whose outputs are summed into the fused features.
    pub tap_layers: Vec<usize>,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            image_size: 32,
            patch_size: 8,
            layers: 4,
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
            tap_layers: vec![1, 2, 3, 4],
        }
    }
}

impl ImageEncoderConfig {
    /// A 32-layer encoder at large-model dimensions.
    pub fn large_scale() -> Self {
        ImageEncoderConfig {
            image_size: 224,
            patch_size: 14,
            layers: 32,
            dim: 1280,
            heads: 16,
            mlp_hidden: 5120,
            tap_layers: vec![8, 16, 24, 32],
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers is empty".into()));
        }
        if let Some(&t) = self.tap_layers.iter().find(|&&t| t == 0 || t > self.layers) {
            return Err(Error::Config(format!(
                "tap layer {t} outside 1..={}",
                self.layers
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "image dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: Vocab::new().len(),
            max_len: 16,
            layers: 2,
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl TextEncoderConfig {
    pub fn large_scale() -> Self {
        TextEncoderConfig {
            vocab_size: 49408,
            max_len: 77,
            layers: 24,
            dim: 1024,
            heads: 16,
            mlp_hidden: 4096,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "text vocab_size {} smaller than the {} built-in tokens",
                self.vocab_size,
                vocab.len()
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "text dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Image features on a tape. `patch_per_layer[l]` is `hw × C` after block `l+1`.
#[derive(Clone, Debug)]
pub struct EncodedImage {
    pub cls_per_layer: Vec<Var>,
    pub patch_per_layer: Vec<Var>,
    pub fused_patch: Var,
    pub fused_cls: Var,
}

/// Text features on a tape; row 0 of `tokens` is the cls position.
#[derive(Clone, Copy, Debug)]
pub struct EncodedText {
    pub cls: Var,
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

pub const IMAGE_PREFIX: &str = "image_encoder.";
pub const TEXT_PREFIX: &str = "text_encoder.";

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ImageEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let p = IMAGE_PREFIX;
        let pdim = cfg.patch_size * cfg.patch_size * 3;
        let embed = Linear::new(store, rng, &format!("{p}embed"), pdim, cfg.dim, true);
        let cls = store.uniform(rng, format!("{p}cls"), &[1, cfg.dim], true);
        let pos = store.uniform(rng, format!("{p}pos"), &[cfg.num_patches() + 1, cfg.dim], true);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, rng, &format!("{p}block{i}"), cfg.dim, cfg.mlp_hidden, cfg.heads, true))
            .collect();
        Ok(ImageEncoder {
            cfg,
            embed,
            cls,
            pos,
            blocks,
        })
    }

    /// Rearranges `S × S × 3` pixels into `hw × (p·p·3)` patch rows.
    pub fn patchify(&self, pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.cfg.image_size;
        if pixels.shape() != [s, s, 3] {
            return Err(Error::dim(
                "encode_image",
                format!("expected pixels of shape [{s}, {s}, 3], got {:?}", pixels.shape()),
            ));
        }
        let (p, g) = (self.cfg.patch_size, self.cfg.grid());
        let src = pixels.data();
        let mut out = Vec::with_capacity(src.len());
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    let row = ((gy * p + y) * s + gx * p) * 3;
                    out.extend_from_slice(&src[row..row + p * 3]);
                }
            }
        }
        Tensor::new([g * g, p * p * 3], out)
    }

    pub fn encode(&self, bind: &mut Binder, pixels: &Tensor<f32>) -> Result<EncodedImage> {
        let patches = bind.constant(self.patchify(pixels)?);
        let tokens = self.embed.forward(bind, patches)?;
        let cls = bind.p(self.cls);
        let x = bind.tape.concat_rows(&[cls, tokens])?;
        let pos = bind.p(self.pos);
        let mut x = bind.tape.add(x, pos)?;
        let hw = self.cfg.num_patches();
        let (mut cls_per_layer, mut patch_per_layer) = (Vec::new(), Vec::new());
        for block in &self.blocks {
            x = block.forward(bind, x, false)?;
            cls_per_layer.push(bind.tape.slice_rows(x, 0, 1)?);
            patch_per_layer.push(bind.tape.slice_rows(x, 1, hw)?);
        }
        let sum = |bind: &mut Binder, parts: &[Var]| -> Result<Var> {
            let mut acc = parts[self.cfg.tap_layers[0] - 1];
            for &t in &self.cfg.tap_layers[1..] {
                acc = bind.tape.add(acc, parts[t - 1])?;
            }
            Ok(acc)
        };
        let fused_patch = sum(bind, &patch_per_layer)?;
        let fused_cls = sum(bind, &cls_per_layer)?;
        Ok(EncodedImage {
            cls_per_layer,
            patch_per_layer,
            fused_patch,
            fused_cls,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    cls_id: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: TextEncoderConfig,
        vocab: &Vocab,
    ) -> Result<Self> {
        cfg.validate(vocab)?;
        let p = TEXT_PREFIX;
        let tok = store.uniform(rng, format!("{p}tok"), &[cfg.vocab_size, cfg.dim], true);
        let pos = store.uniform(rng, format!("{p}pos"), &[cfg.max_len + 1, cfg.dim], true);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, rng, &format!("{p}block{i}"), cfg.dim, cfg.mlp_hidden, cfg.heads, true))
            .collect();
        let ln = LayerNorm::new(store, &format!("{p}ln"), cfg.dim, true);
        Ok(TextEncoder {
            cfg,
            tok,
            pos,
            blocks,
            ln,
            cls_id: vocab.cls(),
        })
    }

    /// Encodes `[cls] + ids`; output has `1 + ids.len()` rows.
    pub fn encode(&self, bind: &mut Binder, ids: &[usize]) -> Result<EncodedText> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::Input(format!(
                "caption of {} tokens exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let seq: Vec<usize> = std::iter::once(self.cls_id).chain(ids.iter().copied()).collect();
        let table = bind.p(self.tok);
        let x = bind.tape.embedding(table, &seq)?;
        let pos = bind.p(self.pos);
        let pos = bind.tape.slice_rows(pos, 0, seq.len())?;
        let mut x = bind.tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(bind, x, false)?;
        }
        let tokens = self.ln.forward(bind, x)?;
        let cls = bind.tape.slice_rows(tokens, 0, 1)?;
        Ok(EncodedText { cls, tokens })
    }
}

/// Prompt ensembles for the two pixel classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrompts {
    pub natural: Vec<String>,
    pub unnatural: Vec<String>,
}

impl Default for ClassPrompts {
    fn default() -> Self {
        let templates = ["a photo of a", "a photo of the"];
        let compose = |states: &[&str]| -> Vec<String> {
            templates
                .iter()
                .flat_map(|t| states.iter().map(move |s| format!("{t} {s} image")))
                .collect()
        };
        ClassPrompts {
            natural: compose(&["natural", "pristine", "authentic", "unaltered"]),
            unnatural: compose(&["manipulated", "edited", "forged", "tampered"]),
        }
    }
}

/// `2 × C_text` matrix: row 0 natural, row 1 unnatural, each the mean cls
/// feature of its prompt ensemble.
pub fn encode_class_prompts(
    bind: &mut Binder,
    encoder: &TextEncoder,
    vocab: &Vocab,
    prompts: &ClassPrompts,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(2);
    for (name, set) in [("natural", &prompts.natural), ("unnatural", &prompts.unnatural)] {
        if set.is_empty() {
            return Err(Error::Config(format!("empty {name} class prompt set")));
        }
        let mut cls = Vec::with_capacity(set.len());
        for text in set {
            let ids = vocab.encode(text)?;
            cls.push(encoder.encode(bind, &ids)?.cls);
        }
        let stacked = bind.tape.concat_rows(&cls)?;
        rows.push(bind.tape.mean_rows(stacked)?);
    }
    bind.tape.concat_rows(&rows)
}

//! Toy causal language model, prompt layout and assembly, and
//! candidate-answer decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Var;
use crate::vocab::Vocab;

pub const LM_PREFIX: &str = "lm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            max_len: 64,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerLabel {
    Real,
    Fake,
}

impl AnswerLabel {
    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            AnswerLabel::Fake
        } else {
            AnswerLabel::Real
        }
    }

    pub fn label(self) -> u8 {
        u8::from(self == AnswerLabel::Fake)
    }

    pub fn word(self) -> &'static str {
        match self {
            AnswerLabel::Real => "real",
            AnswerLabel::Fake => "fake",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub symbol: String,
    pub label: AnswerLabel,
}

/// Instruction template text. Every piece is whitespace-tokenized against the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub human: String,
    pub image_open: String,
    pub image_close: String,
    pub question: String,
    pub options_intro: String,
    pub options: Vec<AnswerOption>,
    pub assistant: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            human: "### Human :".into(),
            image_open: "<Img>".into(),
            image_close: "</Img>".into(),
            question: "Does the image match the text ?".into(),
            options_intro: "Options :".into(),
            options: vec![
                AnswerOption {
                    symbol: "A".into(),
                    label: AnswerLabel::Real,
                },
                AnswerOption {
                    symbol: "B".into(),
                    label: AnswerLabel::Fake,
                },
            ],
            assistant: "### Assistant :".into(),
        }
    }
}

/// Where the soft prompt vectors sit relative to the forgery features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftPromptPlacement {
    #[default]
    BeforeSemantic,
    AfterForgery,
}

/// Which injected embeddings a prompt carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureSlots {
    pub semantic: bool,
    pub map: bool,
    pub token: bool,
    pub soft: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(usize),
    Image(usize),
    Soft(usize),
    Semantic,
    Map,
    ArtifactToken,
}

/// Token/slot sequence of a prompt plus the candidate answers read at its last position.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptLayout {
    pub slots: Vec<Slot>,
    /// Vocabulary ids of the candidate answers, in option order.
    pub answer_ids: Vec<usize>,
    pub answer_labels: Vec<AnswerLabel>,
    pub features: FeatureSlots,
}

impl PromptLayout {
    /// With `heuristics` the question lists the options and answers are the
    /// option symbols; without, the question stands alone and the answers
    /// are the words `real` / `fake`.
    pub fn build(
        vocab: &Vocab,
        template: &PromptTemplate,
        heuristics: bool,
        image_tokens: usize,
        features: FeatureSlots,
        placement: SoftPromptPlacement,
    ) -> Result<Self> {
        let labels: Vec<AnswerLabel> = template.options.iter().map(|o| o.label).collect();
        if labels.len() != 2 || labels[0] == labels[1] {
            return Err(Error::Config(
                "answer options must map to exactly one real and one fake label".into(),
            ));
        }
        let tokens = |text: &str| -> Result<Vec<Slot>> {
            Ok(encode_config(vocab, text)?.into_iter().map(Slot::Token).collect())
        };
        let mut slots = tokens(&template.human)?;
        slots.extend(tokens(&template.image_open)?);
        slots.extend((0..image_tokens).map(Slot::Image));
        slots.extend(tokens(&template.image_close)?);

        let soft = (0..features.soft).map(Slot::Soft);
        let forgery = [
            (features.semantic, Slot::Semantic),
            (features.map, Slot::Map),
            (features.token, Slot::ArtifactToken),
        ]
        .into_iter()
        .filter_map(|(on, s)| on.then_some(s));
        match placement {
            SoftPromptPlacement::BeforeSemantic => {
                slots.extend(soft);
                slots.extend(forgery);
            }
            SoftPromptPlacement::AfterForgery => {
                slots.extend(forgery);
                slots.extend(soft);
            }
        }

        let mut question = template.question.clone();
        let answer_ids = if heuristics {
            question.push(' ');
            question.push_str(&template.options_intro);
            for o in &template.options {
                question.push_str(&format!(" ( {} ) {} news", o.symbol, o.label.word()));
            }
            question.push_str(" .");
            let ids = template
                .options
                .iter()
                .map(|o| {
                    if o.symbol.split_whitespace().count() != 1 {
                        return Err(Error::Config(format!(
                            "option symbol {:?} must be a single token",
                            o.symbol
                        )));
                    }
                    encode_config(vocab, &o.symbol).map(|v| v[0])
                })
                .collect::<Result<Vec<_>>>()?;
            if ids[0] == ids[1] {
                return Err(Error::Config("option symbols must be distinct".into()));
            }
            ids
        } else {
            labels
                .iter()
                .map(|l| encode_config(vocab, l.word()).map(|v| v[0]))
                .collect::<Result<Vec<_>>>()?
        };
        slots.extend(tokens(&question)?);
        slots.extend(tokens(&template.assistant)?);
        Ok(PromptLayout {
            slots,
            answer_ids,
            answer_labels: labels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Space-separated rendering: words for tokens, bracketed names for slots.
    pub fn describe(&self, vocab: &Vocab) -> String {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Token(id) => vocab.word(id).unwrap_or("<?>").to_string(),
                Slot::Image(i) => format!("[IMAGE{i}]"),
                Slot::Soft(i) => format!("[SOFT{i}]"),
                Slot::Semantic => "[SEMANTIC]".into(),
                Slot::Map => "[MAP]".into(),
                Slot::ArtifactToken => "[TOKEN]".into(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Vocabulary id of the answer for a ground-truth label.
    pub fn target(&self, label: u8) -> usize {
        let want = AnswerLabel::from_label(label);
        let i = self.answer_labels.iter().position(|&l| l == want).unwrap_or(0);
        self.answer_ids[i]
    }
}

fn encode_config(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    vocab.encode(text).map_err(|e| Error::Config(format!("prompt template: {e}")))
}

/// Embeddings that fill the non-token slots of a layout; all rows are `C_lm` wide.
#[derive(Clone, Copy, Debug, Default)]
pub struct PromptParts {
    pub image: Option<Var>,
    pub soft: Option<Var>,
    pub semantic: Option<Var>,
    pub map: Option<Var>,
    pub token: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub cfg: LmConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    image_proj: Linear,
    vocab_size: usize,
}

impl ToyLm {
    /// `c_img` is the width of the image feature fed through the image projector.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: LmConfig,
        vocab: &Vocab,
        c_img: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = LM_PREFIX;
        let v = vocab.len();
        Ok(ToyLm {
            tok: store.uniform(rng, format!("{p}tok"), &[v, cfg.dim], true),
            pos: store.uniform(rng, format!("{p}pos"), &[cfg.max_len, cfg.dim], true),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(store, rng, &format!("{p}block{i}"), cfg.dim, cfg.mlp_hidden, cfg.heads, true))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{p}ln_f"), cfg.dim, true),
            head: Linear::new(store, rng, &format!("{p}head"), cfg.dim, v, true),
            image_proj: Linear::new(store, rng, &format!("{p}image_proj"), c_img, cfg.dim, true),
            vocab_size: v,
            cfg,
        })
    }

    pub fn embed(&self, bind: &mut Binder, ids: &[usize]) -> Result<Var> {
        let table = bind.p(self.tok);
        bind.tape.embedding(table, ids)
    }

    /// Image feature rows into the LM embedding space.
    pub fn project_image(&self, bind: &mut Binder, x: Var) -> Result<Var> {
        self.image_proj.forward(bind, x)
    }

    /// Embeds the layout's tokens and splices in the provided embeddings.
    /// Every slot kind in the layout must be supplied with the matching row
    /// count, and nothing else may be supplied.
    pub fn assemble_prompt(&self, bind: &mut Binder, layout: &PromptLayout, parts: &PromptParts) -> Result<Var> {
        let count = |pred: fn(&Slot) -> bool| layout.slots.iter().filter(|s| pred(s)).count();
        let check = |name: &str, part: Option<Var>, want: usize, bind: &Binder| -> Result<()> {
            let have = part.map(|v| bind.tape.shape(v)[0]);
            match (have, want) {
                (None, 0) => Ok(()),
                (None, _) => Err(Error::Assembly(format!("missing {name} embedding"))),
                (Some(_), 0) => Err(Error::Assembly(format!("unexpected {name} embedding"))),
                (Some(n), w) if n != w => Err(Error::Assembly(format!(
                    "{name} embedding has {n} rows, layout expects {w}"
                ))),
                _ => Ok(()),
            }
        };
        check("image", parts.image, count(|s| matches!(s, Slot::Image(_))), bind)?;
        check("soft prompt", parts.soft, count(|s| matches!(s, Slot::Soft(_))), bind)?;
        check("semantic", parts.semantic, count(|s| matches!(s, Slot::Semantic)), bind)?;
        check("map", parts.map, count(|s| matches!(s, Slot::Map)), bind)?;
        check("token", parts.token, count(|s| matches!(s, Slot::ArtifactToken)), bind)?;
        for v in [parts.image, parts.soft, parts.semantic, parts.map, parts.token].into_iter().flatten() {
            if bind.tape.shape(v).len() != 2 || bind.tape.shape(v)[1] != self.cfg.dim {
                return Err(Error::Assembly(format!(
                    "embedding of shape {:?} is not {} wide",
                    bind.tape.shape(v),
                    self.cfg.dim
                )));
            }
        }

        let mut pieces = Vec::new();
        let mut i = 0;
        while i < layout.slots.len() {
            match layout.slots[i] {
                Slot::Token(_) => {
                    let mut ids = Vec::new();
                    while let Some(Slot::Token(id)) = layout.slots.get(i) {
                        ids.push(*id);
                        i += 1;
                    }
                    pieces.push(self.embed(bind, &ids)?);
                    continue;
                }
                Slot::Image(k) => {
                    pieces.push(bind.tape.slice_rows(parts.image.unwrap(), k, 1)?);
                }
                Slot::Soft(k) => {
                    pieces.push(bind.tape.slice_rows(parts.soft.unwrap(), k, 1)?);
                }
                Slot::Semantic => pieces.push(parts.semantic.unwrap()),
                Slot::Map => pieces.push(parts.map.unwrap()),
                Slot::ArtifactToken => pieces.push(parts.token.unwrap()),
            }
            i += 1;
        }
        bind.tape.concat_rows(&pieces)
    }

    fn hidden(&self, bind: &mut Binder, seq: Var) -> Result<Var> {
        let n = bind.tape.shape(seq)[0];
        if n == 0 || n > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sequence of {n} positions outside 1..={}",
                self.cfg.max_len
            )));
        }
        let pos = bind.p(self.pos);
        let pos = bind.tape.slice_rows(pos, 0, n)?;
        let mut x = bind.tape.add(seq, pos)?;
        for block in &self.blocks {
            x = block.forward(bind, x, true)?;
        }
        Ok(x)
    }

    /// Next-token logits at every position: `L × V`.
    pub fn forward(&self, bind: &mut Binder, seq: Var) -> Result<Var> {
        let x = self.hidden(bind, seq)?;
        let x = self.ln_f.forward(bind, x)?;
        self.head.forward(bind, x)
    }

    /// Next-token logits at the last (assistant) position: `1 × V`.
    pub fn answer_logits(&self, bind: &mut Binder, seq: Var) -> Result<Var> {
        let x = self.hidden(bind, seq)?;
        let n = bind.tape.shape(x)[0];
        let last = bind.tape.slice_rows(x, n - 1, 1)?;
        let last = self.ln_f.forward(bind, last)?;
        self.head.forward(bind, last)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Decoded answer for one prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: u8,
    /// Probability of the fake answer under the two-way softmax.
    pub score: f64,
}

/// Softmax restricted to the candidate answers; ties go to the first option.
pub fn predict_answer(logits: &[f32], layout: &PromptLayout) -> Result<Prediction> {
    let pick = |id: usize| {
        logits
            .get(id)
            .map(|&x| x as f64)
            .ok_or_else(|| Error::Config(format!("answer token {id} outside {} logits", logits.len())))
    };
    let (a, b) = (pick(layout.answer_ids[0])?, pick(layout.answer_ids[1])?);
    let fake = layout
        .answer_labels
        .iter()
        .position(|&l| l == AnswerLabel::Fake)
        .unwrap_or(1);
    let (fake_logit, real_logit) = if fake == 0 { (a, b) } else { (b, a) };
    let winner = usize::from(b > a);
    Ok(Prediction {
        label: layout.answer_labels[winner].label(),
        score: 1.0 / (1.0 + (real_logit - fake_logit).exp()),
    })
}

/// Copies a tensor of logits off the tape.
pub fn logits_row(bind: &Binder, logits: Var) -> Vec<f32> {
    bind.tape.value(logits).data().to_vec()
}

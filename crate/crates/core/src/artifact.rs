//! Dual-branch visual-artifact localization: a text-prompted per-pixel
//! segmentation branch and a learnable-query aggregation branch with a box head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Var;

pub use crate::bbox::BBox;

/// What the map projector receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapActivation {
    #[default]
    LogSoftmax,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    /// Shared space for pixel and class-prompt features.
    pub proj_dim: usize,
    pub agg_heads: usize,
    pub map_channels: [usize; 2],
    pub map_activation: MapActivation,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            proj_dim: 64,
            agg_heads: 4,
            map_channels: [8, 16],
            map_activation: MapActivation::LogSoftmax,
        }
    }
}

#[derive(Clone, Debug)]
struct Deconv {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

/// Everything the artifact branch produces for one sample.
#[derive(Clone, Copy, Debug)]
pub struct ArtifactOutput {
    /// `(H·W) × C` pixel-decoder output.
    pub f_h: Var,
    /// `(H·W) × 2` cosine similarities to the natural/unnatural prompts.
    pub w: Var,
    /// `(H·W) × 2` per-pixel log-probabilities.
    pub m_s: Var,
    pub u_agg: Var,
    /// `1 × 4` corner-form box.
    pub bbox: Var,
    pub map_embedding: Var,
    pub token_embedding: Var,
}

#[derive(Clone, Debug)]
pub struct ArtifactModule {
    pub cfg: ArtifactConfig,
    d_in: usize,
    deconv: [Deconv; 2],
    ln_in: LayerNorm,
    proj_h: Linear,
    proj_p: Linear,
    q_tok: ParamId,
    ln_pat: LayerNorm,
    agg_in: [Linear; 3],
    agg_out: Linear,
    bbox_hidden: Linear,
    bbox_out: Linear,
    map_conv: [Conv; 2],
    map_linear: Linear,
    token_proj: Linear,
}

pub const ARTIFACT_PREFIX: &str = "artifact.";

impl ArtifactModule {
    /// `d_in`: width of the incoming patch tokens; `grid`: patches per side.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: ArtifactConfig,
        d_in: usize,
        c_text: usize,
        c_lm: usize,
        grid: usize,
    ) -> Result<Self> {
        if cfg.agg_heads == 0 || d_in % cfg.agg_heads != 0 {
            return Err(Error::Config(format!(
                "artifact token width {d_in} not divisible by {} heads",
                cfg.agg_heads
            )));
        }
        let p = ARTIFACT_PREFIX;
        let deconv = [0, 1].map(|i| Deconv {
            kernel: store.uniform(rng, format!("{p}decoder{i}.kernel"), &[d_in, 2, 2, d_in], true),
            bias: store.zeros(format!("{p}decoder{i}.bias"), &[d_in], true),
        });
        let [c1, c2] = cfg.map_channels;
        let map_conv = [(2, c1), (c1, c2)].map(|(cin, cout)| {
            let i = usize::from(cin != 2);
            Conv {
                kernel: store.uniform(rng, format!("{p}map_conv{i}.kernel"), &[2, 2, cin, cout], true),
                bias: store.zeros(format!("{p}map_conv{i}.bias"), &[cout], true),
            }
        });
        // Seg map is 4·grid per side; two stride-2 convs bring it back to grid.
        let flat = grid * grid * c2;
        Ok(ArtifactModule {
            d_in,
            deconv,
            ln_in: LayerNorm::new(store, &format!("{p}ln_in"), d_in, true),
            proj_h: Linear::new(store, rng, &format!("{p}proj_pixel"), d_in, cfg.proj_dim, true),
            proj_p: Linear::new(store, rng, &format!("{p}proj_prompt"), c_text, cfg.proj_dim, true),
            q_tok: store.uniform(rng, format!("{p}q_tok"), &[1, d_in], true),
            ln_pat: LayerNorm::new(store, &format!("{p}ln_patch"), d_in, true),
            agg_in: ["q", "k", "v"].map(|n| Linear::new(store, rng, &format!("{p}agg_{n}"), d_in, d_in, true)),
            agg_out: Linear::new(store, rng, &format!("{p}agg_out"), d_in, d_in, true),
            bbox_hidden: Linear::new(store, rng, &format!("{p}bbox.hidden"), d_in, d_in, true),
            bbox_out: Linear::new(store, rng, &format!("{p}bbox.out"), d_in, 4, true),
            map_conv,
            map_linear: Linear::new(store, rng, "projector.map", flat, c_lm, true),
            token_proj: Linear::new(store, rng, "projector.token", d_in, c_lm, true),
            cfg,
        })
    }

    /// `hw × C` patch tokens to a `(4√hw)² × C` pixel map via two stride-2
    /// transposed convolutions with a GELU between them.
    pub fn pixel_decode(&self, bind: &mut Binder, u_pat: Var) -> Result<Var> {
        let (hw, c) = (bind.tape.shape(u_pat)[0], bind.tape.shape(u_pat)[1]);
        let g = (hw as f64).sqrt().round() as usize;
        if g * g != hw || hw == 0 {
            return Err(Error::Config(format!("{hw} patch tokens do not form a square grid")));
        }
        let mut x = bind.tape.reshape(u_pat, [g, g, c])?;
        let mut side = g;
        for (i, layer) in self.deconv.iter().enumerate() {
            let k = bind.p(layer.kernel);
            x = bind.tape.conv_transpose2d(x, k, 2)?;
            side *= 2;
            let flat = bind.tape.reshape(x, [side * side, self.d_in])?;
            let b = bind.p(layer.bias);
            let mut y = bind.tape.add_row(flat, b)?;
            if i == 0 {
                y = bind.tape.gelu(y);
            }
            x = bind.tape.reshape(y, [side, side, self.d_in])?;
        }
        bind.tape.reshape(x, [side * side, self.d_in])
    }

    /// Cosine similarity of every pixel feature with both class features.
    pub fn similarity(&self, bind: &mut Binder, f_h: Var, f_p: Var) -> Result<Var> {
        let h = self.proj_h.forward(bind, f_h)?;
        let h = bind.tape.l2_normalize_rows(h)?;
        let p = self.proj_p.forward(bind, f_p)?;
        let p = bind.tape.l2_normalize_rows(p)?;
        bind.tape.matmul_t(h, p)
    }

    pub fn aggregate(&self, bind: &mut Binder, u_pat: Var) -> Result<Var> {
        if bind.tape.shape(u_pat)[0] == 0 {
            return Err(Error::Input("no patch tokens to aggregate".into()));
        }
        let x = self.ln_pat.forward(bind, u_pat)?;
        let q_tok = bind.p(self.q_tok);
        let [wq, wk, wv] = &self.agg_in;
        let q = wq.forward(bind, q_tok)?;
        let k = wk.forward(bind, x)?;
        let v = wv.forward(bind, x)?;
        let wo = bind.p(self.agg_out.w);
        let bo = self.agg_out.b.map(|b| bind.p(b));
        bind.tape
            .multi_head_attention(q, k, v, self.cfg.agg_heads, false, Some((wo, bo)))
    }

    /// Two-layer MLP to `(cx, cy, w, h)` in `(0,1)`, then corners
    /// `x1 = (1 - w)·cx`, `x2 = x1 + w` (same for y), valid by construction.
    pub fn predict_bbox(&self, bind: &mut Binder, u_agg: Var) -> Result<Var> {
        let h = self.bbox_hidden.forward(bind, u_agg)?;
        let h = bind.tape.relu(h);
        let s = self.bbox_out.forward(bind, h)?;
        let s = bind.tape.sigmoid(s);
        let col = |bind: &mut Binder, i| bind.tape.slice_cols(s, i, 1);
        let (cx, cy, w, h) = (col(bind, 0)?, col(bind, 1)?, col(bind, 2)?, col(bind, 3)?);
        let mut corners = |c: Var, size: Var| -> Result<(Var, Var)> {
            let free = bind.tape.rsub_scalar(1.0, size);
            let lo = bind.tape.mul(free, c)?;
            let hi = bind.tape.add(lo, size)?;
            Ok((lo, hi))
        };
        let (x1, x2) = corners(cx, w)?;
        let (y1, y2) = corners(cy, h)?;
        bind.tape.concat_cols(&[x1, y1, x2, y2])
    }

    /// `m_s` is `(H·W) × 2`; returns `(map_embedding, token_embedding)`.
    pub fn embeddings(&self, bind: &mut Binder, m_s: Var, u_agg: Var) -> Result<(Var, Var)> {
        let n = bind.tape.shape(m_s)[0];
        let side = (n as f64).sqrt().round() as usize;
        let mut x = bind.tape.reshape(m_s, [side, side, 2])?;
        let mut s = side;
        for conv in &self.map_conv {
            let k = bind.p(conv.kernel);
            x = bind.tape.conv2d(x, k, 2)?;
            s /= 2;
            let c = *bind.tape.shape(x).last().unwrap();
            let flat = bind.tape.reshape(x, [s * s, c])?;
            let b = bind.p(conv.bias);
            let y = bind.tape.add_row(flat, b)?;
            let y = bind.tape.gelu(y);
            x = bind.tape.reshape(y, [s, s, c])?;
        }
        let numel = bind.tape.value(x).numel();
        let flat = bind.tape.reshape(x, [1, numel])?;
        let map_embedding = self.map_linear.forward(bind, flat)?;
        let token_embedding = self.token_proj.forward(bind, u_agg)?;
        Ok((map_embedding, token_embedding))
    }

    /// Full branch: `u_pat` is `hw × d_in`, `f_p` is the `2 × C_text` class-prompt matrix.
    pub fn forward(&self, bind: &mut Binder, u_pat: Var, f_p: Var) -> Result<ArtifactOutput> {
        let x = self.ln_in.forward(bind, u_pat)?;
        let f_h = self.pixel_decode(bind, x)?;
        let w = self.similarity(bind, f_h, f_p)?;
        let m_s = segmentation_map(bind, w)?;
        let u_agg = self.aggregate(bind, u_pat)?;
        let bbox = self.predict_bbox(bind, u_agg)?;
        let map_in = match self.cfg.map_activation {
            MapActivation::LogSoftmax => m_s,
            MapActivation::Softmax => bind.tape.softmax(w, 1)?,
        };
        let (map_embedding, token_embedding) = self.embeddings(bind, map_in, u_agg)?;
        Ok(ArtifactOutput {
            f_h,
            w,
            m_s,
            u_agg,
            bbox,
            map_embedding,
            token_embedding,
        })
    }
}

/// Per-pixel log-softmax over the two class channels.
pub fn segmentation_map(bind: &mut Binder, w: Var) -> Result<Var> {
    bind.tape.log_softmax(w, 1)
}

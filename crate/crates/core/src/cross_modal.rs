//! Dual-branch cross-attention between image and text features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossModalConfig {
    /// Shared attention width both modalities are adapted to.
    pub dim: usize,
    pub heads: usize,
    /// Adds the query features back onto the attention output; needs both
    /// modality widths equal to `dim`.
    pub residual: bool,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        CrossModalConfig {
            dim: 64,
            heads: 1,
            residual: true,
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    q: Linear,
    k: Linear,
    v: Linear,
    ln_q: LayerNorm,
    ln_k: LayerNorm,
    ln_v: LayerNorm,
    out: Option<Linear>,
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_query: usize,
        d_kv: usize,
        cfg: &CrossModalConfig,
    ) -> Self {
        let d = cfg.dim;
        Branch {
            q: Linear::new(store, rng, &format!("{name}.adapt_q"), d_query, d, true),
            k: Linear::new(store, rng, &format!("{name}.adapt_k"), d_kv, d, true),
            v: Linear::new(store, rng, &format!("{name}.adapt_v"), d_kv, d, true),
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d, true),
            ln_k: LayerNorm::new(store, &format!("{name}.ln_k"), d, true),
            ln_v: LayerNorm::new(store, &format!("{name}.ln_v"), d, true),
            out: (cfg.heads > 1).then(|| Linear::new(store, rng, &format!("{name}.out"), d, d, true)),
        }
    }

    fn forward(
        &self,
        bind: &mut Binder,
        query: Var,
        context: Var,
        heads: usize,
        residual: bool,
    ) -> Result<Var> {
        let q = self.q.forward(bind, query)?;
        let q = self.ln_q.forward(bind, q)?;
        let k = self.k.forward(bind, context)?;
        let k = self.ln_k.forward(bind, k)?;
        let v = self.v.forward(bind, context)?;
        let v = self.ln_v.forward(bind, v)?;
        let out = match &self.out {
            None => bind.tape.attention(q, k, v, false)?,
            Some(o) => {
                let w = bind.p(o.w);
                let b = o.b.map(|b| bind.p(b));
                bind.tape.multi_head_attention(q, k, v, heads, false, Some((w, b)))?
            }
        };
        if residual {
            bind.tape.add(out, query)
        } else {
            Ok(out)
        }
    }
}

/// Cross-attended features; each `*_cls` is row 0 of its stream.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalOutput {
    pub u_v: Var,
    pub u_t: Var,
    pub u_v_cls: Var,
    pub u_v_pat: Var,
    pub u_t_cls: Var,
    pub u_t_pat: Var,
}

#[derive(Clone, Debug)]
pub struct CrossModal {
    pub cfg: CrossModalConfig,
    image_query: Branch,
    text_query: Branch,
}

pub const CROSS_PREFIX: &str = "cross_modal.";

impl CrossModal {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: CrossModalConfig,
        c_img: usize,
        c_text: usize,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "cross-modal dim {} not divisible by {} heads",
                cfg.dim, cfg.heads
            )));
        }
        if cfg.residual && (c_img != cfg.dim || c_text != cfg.dim) {
            return Err(Error::Config(format!(
                "residual cross-attention needs image and text widths equal to dim {}, got {c_img} and {c_text}",
                cfg.dim
            )));
        }
        let image_query = Branch::new(store, rng, "cross_modal.image_query", c_img, c_text, &cfg);
        let text_query = Branch::new(store, rng, "cross_modal.text_query", c_text, c_img, &cfg);
        Ok(CrossModal {
            cfg,
            image_query,
            text_query,
        })
    }

    /// `f_v` is `(1 + hw) × C_img`, `f_t` is `(1 + n) × C_text`, cls first in both.
    pub fn forward(&self, bind: &mut Binder, f_v: Var, f_t: Var) -> Result<CrossModalOutput> {
        let (nv, nt) = (bind.tape.shape(f_v)[0], bind.tape.shape(f_t)[0]);
        if nt == 0 {
            return Err(Error::Input("empty text sequence".into()));
        }
        if nv == 0 {
            return Err(Error::Input("empty image sequence".into()));
        }
        let (heads, residual) = (self.cfg.heads, self.cfg.residual);
        let u_v = self.image_query.forward(bind, f_v, f_t, heads, residual)?;
        let u_t = self.text_query.forward(bind, f_t, f_v, heads, residual)?;
        Ok(CrossModalOutput {
            u_v,
            u_t,
            u_v_cls: bind.tape.slice_rows(u_v, 0, 1)?,
            u_v_pat: bind.tape.slice_rows(u_v, 1, nv - 1)?,
            u_t_cls: bind.tape.slice_rows(u_t, 0, 1)?,
            u_t_pat: bind.tape.slice_rows(u_t, 1, nt - 1)?,
        })
    }
}

/// Linear map from the concatenated cls pair into the LM embedding space.
#[derive(Clone, Debug)]
pub struct SemanticProjector {
    pub linear: Linear,
}

impl SemanticProjector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_cross: usize, c_lm: usize) -> Self {
        SemanticProjector {
            linear: Linear::new(store, rng, "projector.semantic", 2 * d_cross, c_lm, true),
        }
    }

    pub fn forward(&self, bind: &mut Binder, u_v_cls: Var, u_t_cls: Var) -> Result<Var> {
        let pair = bind.tape.concat_cols(&[u_v_cls, u_t_cls])?;
        self.linear.forward(bind, pair)
    }
}

//! Parameterized layers shared by the encoders, the knowledge modules and the LM.

use rand::Rng;

use crate::error::Result;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Var;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        trainable: bool,
    ) -> Self {
        let w = store.uniform(rng, format!("{name}.w"), &[din, dout], trainable);
        let b = store.zeros(format!("{name}.b"), &[dout], trainable);
        Linear { w, b: Some(b) }
    }

    pub fn forward(&self, bind: &mut Binder, x: Var) -> Result<Var> {
        let w = bind.p(self.w);
        let b = self.b.map(|b| bind.p(b));
        bind.tape.linear(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.g"), &[dim], trainable),
            beta: store.zeros(format!("{name}.b"), &[dim], trainable),
        }
    }

    pub fn forward(&self, bind: &mut Binder, x: Var) -> Result<Var> {
        let g = bind.p(self.gamma);
        let b = bind.p(self.beta);
        bind.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
    heads: usize,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        trainable: bool,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, trainable),
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, trainable),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, trainable),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, trainable),
            out: Linear::new(store, rng, &format!("{name}.o"), dim, dim, trainable),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, trainable),
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, trainable),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, trainable),
            heads,
        }
    }

    pub fn forward(&self, bind: &mut Binder, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(bind, x)?;
        let q = self.q.forward(bind, h)?;
        let k = self.k.forward(bind, h)?;
        let v = self.v.forward(bind, h)?;
        let wo = bind.p(self.out.w);
        let bo = self.out.b.map(|b| bind.p(b));
        let a = bind
            .tape
            .multi_head_attention(q, k, v, self.heads, causal, Some((wo, bo)))?;
        let x = bind.tape.add(x, a)?;
        let h = self.ln2.forward(bind, x)?;
        let h = self.up.forward(bind, h)?;
        let h = bind.tape.gelu(h);
        let h = self.down.forward(bind, h)?;
        bind.tape.add(x, h)
    }
}

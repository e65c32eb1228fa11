//! Parameterized building blocks shared by the conditioning encoder and the
//! transformer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{AttentionGroup, Graph, Group, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub fn init_tensor(rng: &mut impl Rng, shape: &[usize], init: Init) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn param(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    group: Group,
    shape: &[usize],
    init: Init,
) -> ParamId {
    store.insert(name, group, init_tensor(rng, shape, init))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        (fan_in, fan_out): (usize, usize),
        init: Init,
    ) -> Self {
        Linear {
            w: param(store, rng, &format!("{name}.w"), group, &[fan_in, fan_out], init),
            b: param(store, rng, &format!("{name}.b"), group, &[fan_out], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, group: Group, width: usize) -> Self {
        LayerNorm {
            gain: param(store, rng, &format!("{name}.gain"), group, &[width], Init::Ones),
            bias: param(store, rng, &format!("{name}.bias"), group, &[width], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        width: usize,
        heads: usize,
        std: f64,
        out_init: Init,
    ) -> Self {
        let mut lin = |suffix: &str, init| {
            Linear::new(store, rng, &format!("{name}.{suffix}"), group, (width, width), init)
        };
        Attention {
            q: lin("q", Init::Normal(std)),
            k: lin("k", Init::Normal(std)),
            v: lin("v", Init::Normal(std)),
            out: lin("out", out_init),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        context: Var,
        groups: Option<&[AttentionGroup]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, groups)?;
        self.out.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc: Linear,
    pub proj: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        width: usize,
        hidden: usize,
        std: f64,
        out_init: Init,
    ) -> Self {
        Mlp {
            fc: Linear::new(store, rng, &format!("{name}.fc"), group, (width, hidden), Init::Normal(std)),
            proj: Linear::new(store, rng, &format!("{name}.proj"), group, (hidden, width), out_init),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc.forward(g, x)?;
        let h = g.gelu(h);
        self.proj.forward(g, h)
    }
}

/// Pre-norm residual block: self-attention then MLP.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    /// Output projections start at zero, so a fresh block is the identity.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        width: usize,
        heads: usize,
        mlp_mult: usize,
        std: f64,
    ) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(store, rng, &format!("{name}.ln_attn"), group, width),
            attn: Attention::new(store, rng, &format!("{name}.attn"), group, width, heads, std, Init::Zeros),
            ln_mlp: LayerNorm::new(store, rng, &format!("{name}.ln_mlp"), group, width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), group, width, width * mlp_mult, std, Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

//! Bidirectional masked-token transformer.
//!
//! Each block runs self-attention over video tokens, cross-attention to the
//! prompt, an adaptive cross-attention to the control embeddings and an MLP.
//! Everything except the conditioning path and the adaptive cross-attention
//! belongs to the pretrained group.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainSnapshot};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningConfig, ConditioningParams, ControlGrid, PromptTokens};
use crate::error::{Error, Result};
use crate::layers::{param, Attention, Init, LayerNorm, Linear, Mlp};
use crate::numerics::{AttentionGroup, Graph, Group, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::TokenGrid;

/// Which control embeddings a video token may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Tokens of timestep `t` see only the control of timestep `t`.
    PerTimestep,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    /// Video token vocabulary; the MASK id is `vocab`.
    pub vocab: usize,
    pub timesteps: usize,
    pub height: usize,
    pub grid_width: usize,
    pub alignment: Alignment,
    /// Build the conditioning encoder and adaptive layers.
    pub control_enabled: bool,
    pub init_std: f64,
    pub conditioning: ConditioningConfig,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        ModelConfig {
            blocks: 4,
            width: 128,
            heads: 4,
            mlp_mult: 4,
            vocab: 64,
            timesteps: 6,
            height: 8,
            grid_width: 8,
            alignment: Alignment::PerTimestep,
            control_enabled: true,
            init_std: 0.02,
            conditioning: ConditioningConfig {
                prompt_len: 16,
                text_vocab: 18,
                bins: 100,
                appearance_raw_len: 32,
                appearance_tokens: 8,
                slots: 4,
                timesteps: 6,
                encoder_blocks: 2,
                encoder_heads: 4,
            },
        }
    }

    /// Desk geometry (fits generated datasets) with one narrow block.
    pub fn compact() -> Self {
        let mut c = Self::desk();
        c.blocks = 1;
        c.width = 16;
        c.heads = 2;
        c.mlp_mult = 2;
        c.conditioning.appearance_tokens = 2;
        c.conditioning.encoder_blocks = 1;
        c.conditioning.encoder_heads = 2;
        c
    }

    /// Small model for tests and examples.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.blocks = 1;
        c.width = 16;
        c.heads = 2;
        c.mlp_mult = 2;
        c.vocab = 8;
        c.timesteps = 2;
        c.height = 4;
        c.grid_width = 4;
        c.conditioning.prompt_len = 6;
        c.conditioning.appearance_raw_len = 18;
        c.conditioning.appearance_tokens = 2;
        c.conditioning.slots = 2;
        c.conditioning.timesteps = 2;
        c.conditioning.encoder_blocks = 1;
        c.conditioning.encoder_heads = 2;
        c
    }

    pub fn seq_len(&self) -> usize {
        self.timesteps * self.height * self.grid_width
    }

    pub fn mask_id(&self) -> usize {
        self.vocab
    }

    pub fn tokens_per_timestep(&self) -> usize {
        self.height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.width == 0 || self.heads == 0 || self.mlp_mult == 0 {
            return err("blocks, width, heads and mlp_mult must be positive".into());
        }
        if self.width % self.heads != 0 {
            return err(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.vocab < 2 || self.seq_len() == 0 {
            return err("vocabulary and sequence must be non-trivial".into());
        }
        let c = &self.conditioning;
        if c.timesteps != self.timesteps {
            return err(format!(
                "control has {} timesteps but the video has {}",
                c.timesteps, self.timesteps
            ));
        }
        if c.prompt_len == 0 || c.text_vocab == 0 || c.bins == 0 || c.slots == 0 {
            return err("conditioning sizes must be positive".into());
        }
        if c.encoder_heads == 0 || self.width % c.encoder_heads != 0 {
            return err("encoder heads must divide the width".into());
        }
        if !(self.init_std > 0.0) {
            return err("init std must be positive".into());
        }
        Ok(())
    }
}

/// Parameter handles of one transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_text: LayerNorm,
    pub text_attn: Attention,
    pub adaptive: Option<(LayerNorm, Attention)>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub token_embed: ParamId,
    pub pos_t: ParamId,
    pub pos_h: ParamId,
    pub pos_w: ParamId,
    pub text_embed: ParamId,
    pub text_pos: ParamId,
    pub null_prompt: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub head: Linear,
    pub conditioning: Option<ConditioningParams>,
    pub null_control: Option<ParamId>,
}

/// Guidance branch being evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    Conditional,
    Unconditional,
}

/// Encoded conditions consumed by [`ModelState::forward_logits`]. Without a
/// control context the adaptive layers are skipped (text-only mode).
#[derive(Clone, Copy, Debug)]
pub struct Contexts {
    pub prompt: Var,
    pub control: Option<Var>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (d, std) = (config.width, config.init_std);
    let pt = Group::Pretrained;
    let normal = Init::Normal(std);
    let s = &mut store;
    let r = &mut rng;

    let token_embed = param(s, r, "tok.embed", pt, &[config.vocab + 1, d], normal);
    let pos_t = param(s, r, "pos.t", pt, &[config.timesteps, d], normal);
    let pos_h = param(s, r, "pos.h", pt, &[config.height, d], normal);
    let pos_w = param(s, r, "pos.w", pt, &[config.grid_width, d], normal);
    let cc = &config.conditioning;
    let text_embed = param(s, r, "text.embed", pt, &[cc.text_vocab, d], normal);
    let text_pos = param(s, r, "text.pos", pt, &[cc.prompt_len, d], normal);
    let null_prompt = param(s, r, "null.prompt", pt, &[cc.prompt_len, d], normal);

    let mut blocks = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let name = |part: &str| format!("block.{i}.{part}");
        let ln_self = LayerNorm::new(s, r, &name("ln_self"), pt, d);
        let self_attn = Attention::new(s, r, &name("self_attn"), pt, d, config.heads, std, normal);
        let ln_text = LayerNorm::new(s, r, &name("ln_text"), pt, d);
        let text_attn = Attention::new(s, r, &name("text_attn"), pt, d, config.heads, std, normal);
        let adaptive = config.control_enabled.then(|| {
            let g = Group::Adaptive;
            (
                LayerNorm::new(s, r, &name("ln_adapt"), g, d),
                Attention::new(s, r, &name("adapt_attn"), g, d, config.heads, std, Init::Zeros),
            )
        });
        let ln_mlp = LayerNorm::new(s, r, &name("ln_mlp"), pt, d);
        let mlp = Mlp::new(s, r, &name("mlp"), pt, d, d * config.mlp_mult, std, normal);
        blocks.push(Block {
            ln_self,
            self_attn,
            ln_text,
            text_attn,
            adaptive,
            ln_mlp,
            mlp,
        });
    }
    let ln_out = LayerNorm::new(s, r, "out.ln", pt, d);
    let head = Linear::new(s, r, "out.head", pt, (d, config.vocab), normal);

    let (conditioning, null_control) = if config.control_enabled {
        let cp = ConditioningParams::build(s, r, cc, d, std);
        let nc = param(s, r, "null.control", Group::Adaptive, &[1, d], normal);
        (Some(cp), Some(nc))
    } else {
        (None, None)
    };

    Ok(ModelState {
        config: config.clone(),
        store,
        token_embed,
        pos_t,
        pos_h,
        pos_w,
        text_embed,
        text_pos,
        null_prompt,
        blocks,
        ln_out,
        head,
        conditioning,
        null_control,
    })
}

/// Adds control layers to a text-only model. Every pretrained parameter is
/// copied unchanged; the new adaptive parameters are freshly initialized.
pub fn attach_control(pretrained: &ModelState, seed: u64) -> Result<ModelState> {
    let mut config = pretrained.config.clone();
    config.control_enabled = true;
    let mut state = build_model(&config, seed)?;
    for (_, p) in pretrained.store.iter().filter(|(_, p)| p.group == Group::Pretrained) {
        let id = state.store.find(&p.name).ok_or_else(|| {
            Error::Config(format!("parameter {} missing from the control layout", p.name))
        })?;
        if state.store.value(id).shape() != p.tensor.shape() {
            return Err(Error::Config(format!("parameter {} changed shape", p.name)));
        }
        *state.store.value_mut(id) = p.tensor.clone();
    }
    Ok(state)
}

/// Share of parameters in the adaptive group.
pub fn trainable_fraction(state: &ModelState) -> f64 {
    let total = state.store.count(None);
    if total == 0 {
        return 0.0;
    }
    state.store.count(Some(Group::Adaptive)) as f64 / total as f64
}

impl ModelState {
    pub fn seq_len(&self) -> usize {
        self.config.seq_len()
    }

    fn require_control(&self) -> Result<&ConditioningParams> {
        self.conditioning.as_ref().ok_or_else(|| {
            Error::Config("model was built without control layers".into())
        })
    }

    /// Prompt embedding before the joint encoder.
    pub fn embed_prompt(&self, g: &mut Graph<'_>, prompt: &PromptTokens) -> Result<Var> {
        let cc = &self.config.conditioning;
        if prompt.len() != cc.prompt_len {
            return Err(Error::Dimension(format!(
                "prompt has {} tokens, model expects {}",
                prompt.len(),
                cc.prompt_len
            )));
        }
        let table = g.param(self.text_embed);
        let e = g.embedding(table, prompt.ids())?;
        let pos = g.param(self.text_pos);
        g.add(e, pos)
    }

    /// Builds the contexts for one guidance branch. With `control == None`
    /// the model runs text-only and the adaptive layers are skipped.
    pub fn encode_conditions(
        &self,
        g: &mut Graph<'_>,
        prompt: &PromptTokens,
        control: Option<&ControlGrid>,
        mode: CfgMode,
    ) -> Result<Contexts> {
        match (mode, control) {
            (CfgMode::Conditional, None) => Ok(Contexts {
                prompt: self.embed_prompt(g, prompt)?,
                control: None,
            }),
            (CfgMode::Conditional, Some(grid)) => {
                let cp = self.require_control()?;
                let p = self.embed_prompt(g, prompt)?;
                let c = cp.assemble_control_sequence(g, grid)?;
                let (p, c) = cp.joint_encode(g, p, c)?;
                Ok(Contexts {
                    prompt: p,
                    control: Some(c),
                })
            }
            (CfgMode::Unconditional, control) => {
                let prompt = g.param(self.null_prompt);
                let control = match control {
                    None => None,
                    Some(_) => Some(self.null_control_context(g)?),
                };
                Ok(Contexts { prompt, control })
            }
        }
    }

    /// The learned null control, repeated to the full control length.
    pub fn null_control_context(&self, g: &mut Graph<'_>) -> Result<Var> {
        self.require_control()?;
        let id = self.null_control.expect("control layers carry a null control");
        let row = g.param(id);
        let n = self.config.conditioning.control_len();
        g.embedding(row, &vec![0; n])
    }

    fn control_groups(&self, control_rows: usize) -> Result<Option<Vec<AttentionGroup>>> {
        match self.config.alignment {
            Alignment::Global => Ok(None),
            Alignment::PerTimestep => {
                let t = self.config.timesteps;
                if control_rows % t != 0 {
                    return Err(Error::Dimension(format!(
                        "{control_rows} control rows do not split over {t} timesteps"
                    )));
                }
                let per = control_rows / t;
                let hw = self.config.tokens_per_timestep();
                Ok(Some(
                    (0..t)
                        .map(|i| AttentionGroup {
                            queries: i * hw..(i + 1) * hw,
                            keys: i * per..(i + 1) * per,
                        })
                        .collect(),
                ))
            }
        }
    }

    /// Video token logits, `[L, vocab]`. Tokens may include the MASK id.
    pub fn forward_logits(&self, g: &mut Graph<'_>, tokens: &[usize], ctx: &Contexts) -> Result<Var> {
        let cfg = &self.config;
        let l = cfg.seq_len();
        if tokens.len() != l {
            return Err(Error::Dimension(format!(
                "expected {l} tokens, got {}",
                tokens.len()
            )));
        }
        let d = cfg.width;
        for v in [Some(ctx.prompt), ctx.control].into_iter().flatten() {
            if g.value(v).cols() != d {
                return Err(Error::Dimension(format!(
                    "context width {} does not match model width {d}",
                    g.value(v).cols()
                )));
            }
        }
        let groups = match ctx.control {
            Some(c) => {
                if self.conditioning.is_none() {
                    return Err(Error::Config("model was built without control layers".into()));
                }
                self.control_groups(g.value(c).rows())?
            }
            None => None,
        };

        let table = g.param(self.token_embed);
        let mut x = g.embedding(table, tokens)?;
        let hw = cfg.tokens_per_timestep();
        let t_ids: Vec<usize> = (0..l).map(|p| p / hw).collect();
        let h_ids: Vec<usize> = (0..l).map(|p| (p % hw) / cfg.grid_width).collect();
        let w_ids: Vec<usize> = (0..l).map(|p| p % cfg.grid_width).collect();
        for (id, ids) in [(self.pos_t, &t_ids), (self.pos_h, &h_ids), (self.pos_w, &w_ids)] {
            let tbl = g.param(id);
            let e = g.embedding(tbl, ids)?;
            x = g.add(x, e)?;
        }

        for block in &self.blocks {
            let h = block.ln_self.forward(g, x)?;
            let a = block.self_attn.forward(g, h, h, None)?;
            x = g.add(x, a)?;
            let h = block.ln_text.forward(g, x)?;
            let a = block.text_attn.forward(g, h, ctx.prompt, None)?;
            x = g.add(x, a)?;
            if let (Some((ln, attn)), Some(c)) = (&block.adaptive, ctx.control) {
                let h = ln.forward(g, x)?;
                let a = attn.forward(g, h, c, groups.as_deref())?;
                x = g.add(x, a)?;
            }
            let h = block.ln_mlp.forward(g, x)?;
            let m = block.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        let h = self.ln_out.forward(g, x)?;
        self.head.forward(g, h)
    }

    /// Inference convenience: logits for one guidance branch.
    pub fn logits(
        &self,
        tokens: &[usize],
        prompt: &PromptTokens,
        control: Option<&ControlGrid>,
        mode: CfgMode,
    ) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let ctx = self.encode_conditions(&mut g, prompt, control, mode)?;
        let out = self.forward_logits(&mut g, tokens, &ctx)?;
        Ok(g.value(out).clone())
    }

    /// Token ids of a grid as model input.
    pub fn grid_tokens(&self, grid: &TokenGrid) -> Result<Vec<usize>> {
        let c = &self.config;
        if grid.timesteps() != c.timesteps || grid.height() != c.height || grid.width() != c.grid_width {
            return Err(Error::Dimension(format!(
                "token grid {}x{}x{} does not match model {}x{}x{}",
                grid.timesteps(),
                grid.height(),
                grid.width(),
                c.timesteps,
                c.height,
                c.grid_width
            )));
        }
        Ok(grid.flatten().into_iter().map(usize::from).collect())
    }
}

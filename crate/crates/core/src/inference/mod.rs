//! Iterative parallel decoding with classifier-free guidance and
//! sliding-window extension.

mod wire;

pub use wire::{parse_request, FieldError, RequestContext, WireDecode, WireEntity, WireReference, WireRequest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    extract_appearance_feature, quantize_box, ControlGrid, EntityControl, NormBox, PromptTokens,
};
use crate::error::{Error, Result};
use crate::model::{CfgMode, ModelState};
use crate::numerics::{softmax_in_place, Tensor};
use crate::synthworld::derive_seed;
use crate::tokenizer::{decode_tokens, Frame, TokenGrid, VideoClip};

/// Timesteps carried over from the previous window during extension.
pub const OVERLAP_TIMESTEPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Scale of the Gumbel noise added to commitment confidence.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            steps: 12,
            guidance_scale: 2.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    /// Sampling settings of the full-scale system.
    pub fn reference_scale() -> Self {
        DecodeConfig {
            steps: 48,
            guidance_scale: 12.0,
            temperature: 4.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("decode steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Validation("guidance scale must be finite and >= 0".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Validation("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `uncond + s * (cond - uncond)`.
pub fn cfg_logits(cond: &Tensor, uncond: &Tensor, s: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Dimension(format!(
            "guidance needs equal shapes, got {:?} and {:?}",
            cond.shape(),
            uncond.shape()
        )));
    }
    // Written out, s = 1 would round to something other than `cond`.
    if s == 1.0 {
        return Ok(cond.clone());
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(c, u)| u + s * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Positions still masked after each of the `steps` steps, starting from
/// `masked` masked positions: `ceil(cos(pi k / 2S) * masked)`, ending at 0.
pub fn masked_schedule(masked: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|k| {
            let r = (std::f64::consts::PI * k as f64 / (2.0 * steps as f64)).cos();
            // cos(pi / 3) * 10 evaluates a hair above 5; don't let that round up.
            ((r * masked as f64 - 1e-9).ceil().max(0.0) as usize).min(masked)
        })
        .collect()
}

/// Result of a decode with its per-step history.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub grid: TokenGrid,
    /// Masked positions remaining after each step.
    pub masked_counts: Vec<usize>,
    /// Sequence after each step; `None` marks a masked position.
    pub history: Vec<Vec<Option<u16>>>,
}

/// Decodes from all-MASK, except positions given in `fixed`, which are
/// committed up front and never changed.
pub fn decode_with_trace(
    state: &ModelState,
    prompt: &PromptTokens,
    control: Option<&ControlGrid>,
    config: &DecodeConfig,
    fixed: &[Option<u16>],
) -> Result<DecodeTrace> {
    config.validate()?;
    let cfg = &state.config;
    let l = cfg.seq_len();
    if fixed.len() != l {
        return Err(Error::Dimension(format!(
            "{} fixed entries for a sequence of {l}",
            fixed.len()
        )));
    }
    if let Some(bad) = fixed.iter().flatten().find(|&&v| v as usize >= cfg.vocab) {
        return Err(Error::Validation(format!("fixed token {bad} outside the vocabulary")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seq: Vec<Option<u16>> = fixed.to_vec();
    let initially_masked = seq.iter().filter(|s| s.is_none()).count();
    let schedule = masked_schedule(initially_masked, config.steps);
    let mut masked_counts = Vec::with_capacity(config.steps);
    let mut history = Vec::with_capacity(config.steps);
    let s = config.steps as f64;

    for (k, &target) in (1..=config.steps).zip(&schedule) {
        let masked: Vec<usize> = (0..l).filter(|&p| seq[p].is_none()).collect();
        if !masked.is_empty() {
            let input: Vec<usize> = seq
                .iter()
                .map(|v| v.map_or(cfg.mask_id(), usize::from))
                .collect();
            let cond = state.logits(&input, prompt, control, CfgMode::Conditional)?;
            let guided = if config.guidance_scale == 1.0 {
                cond
            } else {
                let uncond = state.logits(&input, prompt, control, CfgMode::Unconditional)?;
                cfg_logits(&cond, &uncond, config.guidance_scale)?
            };
            let noise_scale = config.temperature * (1.0 - k as f64 / s);
            let mut candidates: Vec<(f64, usize, u16)> = Vec::with_capacity(masked.len());
            for &p in &masked {
                let mut probs = guided.row(p).to_vec();
                softmax_in_place(&mut probs);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut id = probs.len() - 1;
                for (i, q) in probs.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        id = i;
                        break;
                    }
                }
                let gumbel = -(-rng.gen_range(f64::MIN_POSITIVE..1.0).ln()).ln();
                let confidence = probs[id].ln() + noise_scale * gumbel;
                candidates.push((confidence, p, id as u16));
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let commit = masked.len().saturating_sub(target);
            for &(_, p, id) in candidates.iter().take(commit) {
                seq[p] = Some(id);
            }
        }
        masked_counts.push(seq.iter().filter(|v| v.is_none()).count());
        history.push(seq.clone());
    }
    let tokens: Vec<u16> = seq
        .into_iter()
        .map(|v| v.expect("the final step commits every position"))
        .collect();
    Ok(DecodeTrace {
        grid: TokenGrid::new(cfg.timesteps, cfg.height, cfg.grid_width, cfg.vocab, tokens)?,
        masked_counts,
        history,
    })
}

pub fn iterative_decode(
    state: &ModelState,
    prompt: &PromptTokens,
    control: Option<&ControlGrid>,
    config: &DecodeConfig,
) -> Result<TokenGrid> {
    let fixed = vec![None; state.seq_len()];
    Ok(decode_with_trace(state, prompt, control, config, &fixed)?.grid)
}

/// Next window: the last [`OVERLAP_TIMESTEPS`] timesteps of `prior` become
/// the first ones of the new window and stay fixed.
pub fn extend_video(
    state: &ModelState,
    prompt: &PromptTokens,
    control: Option<&ControlGrid>,
    config: &DecodeConfig,
    prior: &TokenGrid,
) -> Result<TokenGrid> {
    let cfg = &state.config;
    if prior.timesteps() != cfg.timesteps || prior.height() != cfg.height || prior.width() != cfg.grid_width {
        return Err(Error::Dimension("prior window does not match the model grid".into()));
    }
    if cfg.timesteps <= OVERLAP_TIMESTEPS {
        return Err(Error::Config(format!(
            "extension needs more than {OVERLAP_TIMESTEPS} timesteps per window"
        )));
    }
    let hw = cfg.tokens_per_timestep();
    let mut fixed = vec![None; cfg.seq_len()];
    let src = prior.timesteps() - OVERLAP_TIMESTEPS;
    for t in 0..OVERLAP_TIMESTEPS {
        for (i, &v) in prior.timestep(src + t).iter().enumerate() {
            fixed[t * hw + i] = Some(v);
        }
    }
    Ok(decode_with_trace(state, prompt, control, config, &fixed)?.grid)
}

/// Linear interpolation of a box over `timesteps` steps, unquantized.
pub fn interpolate_boxes(first: &NormBox, last: &NormBox, timesteps: usize) -> Result<Vec<NormBox>> {
    first.validate()?;
    last.validate()?;
    Ok((0..timesteps)
        .map(|t| {
            let a = if timesteps > 1 {
                t as f64 / (timesteps - 1) as f64
            } else {
                0.0
            };
            lerp_box(first, last, a)
        })
        .collect())
}

fn lerp_box(first: &NormBox, last: &NormBox, a: f64) -> NormBox {
    let (f, l) = (first.coords(), last.coords());
    NormBox::from_coords(std::array::from_fn(|i| f[i] + (l[i] - f[i]) * a))
}

/// Quantized trajectory between two boxes.
pub fn interpolate_trajectory(first: &NormBox, last: &NormBox, timesteps: usize, bins: usize) -> Result<Vec<[usize; 4]>> {
    interpolate_boxes(first, last, timesteps)?
        .iter()
        .map(|b| quantize_box(b, bins))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityRequest {
    pub description_id: usize,
    pub first_box: NormBox,
    pub last_box: NormBox,
    pub reference: Frame,
}

/// Prompt, per-entity control and decode settings for one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prompt: PromptTokens,
    pub entities: Vec<EntityRequest>,
    pub decode: DecodeConfig,
    /// Extra windows of six frames each.
    pub extensions: usize,
}

impl GenerationRequest {
    /// Box of entity `n` at timestep `t` of window `window`. Windows advance
    /// by `timesteps - overlap`, and the motion continues at the same rate,
    /// clamped to the frame.
    pub fn box_at(&self, n: usize, window: usize, t: usize, timesteps: usize) -> NormBox {
        let e = &self.entities[n];
        let g = window * (timesteps - OVERLAP_TIMESTEPS) + t;
        let a = if timesteps > 1 {
            g as f64 / (timesteps - 1) as f64
        } else {
            0.0
        };
        let b = lerp_box(&e.first_box, &e.last_box, a).coords();
        let (w, h) = (b[2] - b[0], b[3] - b[1]);
        let x1 = b[0].clamp(0.0, 1.0 - w);
        let y1 = b[1].clamp(0.0, 1.0 - h);
        NormBox::new(x1, y1, x1 + w, y1 + h)
    }

    /// Control grid for one window, entity `n` in slot `n`.
    pub fn control_grid(&self, state: &ModelState, window: usize) -> Result<ControlGrid> {
        let cfg = &state.config;
        let cc = &cfg.conditioning;
        if self.entities.len() > cc.slots {
            return Err(Error::Validation(format!(
                "{} entities exceed the {} control slots",
                self.entities.len(),
                cc.slots
            )));
        }
        let mut grid = ControlGrid::empty(cc.timesteps, cc.slots, cc.appearance_raw_len);
        for (n, e) in self.entities.iter().enumerate() {
            e.first_box.validate()?;
            e.last_box.validate()?;
            let appearance = extract_appearance_feature(&e.reference, cfg.vocab)?;
            for t in 0..cc.timesteps {
                grid.set(
                    t,
                    n,
                    EntityControl {
                        description_id: e.description_id,
                        box_ids: quantize_box(&self.box_at(n, window, t, cc.timesteps), cc.bins)?,
                        appearance: appearance.clone(),
                    },
                );
            }
        }
        Ok(grid)
    }
}

/// Decoded windows and the stitched clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub windows: Vec<TokenGrid>,
    pub clip: VideoClip,
}

/// Runs a request end to end. Text-only models ignore the entity control.
pub fn generate(state: &ModelState, request: &GenerationRequest) -> Result<Generation> {
    request.decode.validate()?;
    let uses_control = state.conditioning.is_some();
    let mut windows: Vec<TokenGrid> = Vec::with_capacity(1 + request.extensions);
    for w in 0..=request.extensions {
        let grid = if uses_control {
            Some(request.control_grid(state, w)?)
        } else {
            None
        };
        let decode = DecodeConfig {
            seed: derive_seed(request.decode.seed, w as u64),
            ..request.decode
        };
        let next = match windows.last() {
            None => iterative_decode(state, &request.prompt, grid.as_ref(), &decode)?,
            Some(prior) => extend_video(state, &request.prompt, grid.as_ref(), &decode, prior)?,
        };
        windows.push(next);
    }
    let mut clip = decode_tokens(&windows[0]);
    for w in &windows[1..] {
        let next = decode_tokens(w);
        // The first frames of a window repeat the tail of the previous one.
        let skip = crate::tokenizer::frames_for_timesteps(OVERLAP_TIMESTEPS);
        clip.append(&next.span(skip, next.len() - skip)?)?;
    }
    Ok(Generation { windows, clip })
}

//! Masked-token training: cosine mask schedule, all-or-nothing condition
//! dropout and the two-stage pretrain / adapt regime.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ControlGrid, PromptTokens};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, trainable_fraction, CfgMode, ModelState, TrainSnapshot};
use crate::numerics::{AdamW, AdamWConfig, Gradients, Graph, Group, MomentState};
use crate::synthworld::{derive_seed, DatasetRecord};
use crate::tokenizer::encode_video;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Text-only training of the pretrained group.
    Pretrain,
    /// Control training of the adaptive group; the rest stays frozen.
    Adapt,
}

impl Stage {
    pub fn groups(self) -> &'static [Group] {
        match self {
            Stage::Pretrain => &[Group::Pretrained],
            Stage::Adapt => &[Group::Adaptive],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub condition_dropout: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Randomly permute entity slots per sample.
    pub shuffle_slots: bool,
}

impl TrainConfig {
    pub fn desk(stage: Stage) -> Self {
        TrainConfig {
            stage,
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 10_000,
            condition_dropout: 0.10,
            seed: 0,
            checkpoint_every: 500,
            shuffle_slots: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config(format!(
                "condition dropout {} outside [0, 1]",
                self.condition_dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// AdamW with this run's learning rate and decay.
    pub fn optimizer(&self) -> Result<AdamW> {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl MaskSample {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `max(1, ceil(ratio * len))`, capped at `len`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).ceil() as usize).clamp(1, len)
}

/// Cosine schedule: `ratio = cos(pi u / 2)` for `u ~ U(0, 1)`.
pub fn sample_mask(rng: &mut impl Rng, len: usize) -> MaskSample {
    let u: f64 = rng.gen();
    let ratio = (std::f64::consts::FRAC_PI_2 * u).cos();
    let mut mask = vec![false; len];
    for i in sample(rng, len, mask_count(ratio, len)) {
        mask[i] = true;
    }
    MaskSample { mask, ratio }
}

/// A record prepared for the model: target tokens and conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<usize>,
    pub prompt: PromptTokens,
    pub control: ControlGrid,
}

pub fn prepare_examples(records: &[DatasetRecord]) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let grid = encode_video(&r.clip)?;
            Ok(TrainExample {
                tokens: grid.flatten().into_iter().map(usize::from).collect(),
                prompt: r.prompt.clone(),
                control: r.control_grid(r.clip.palette_size())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub masked_count: f64,
    pub dropout_flag_rate: f64,
}

/// Forward and backward for one sample; returns loss, gradients, dropout flag.
fn sample_gradients(
    state: &ModelState,
    ex: &TrainExample,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients, usize, bool)> {
    let l = state.seq_len();
    if ex.tokens.len() != l {
        return Err(Error::Dimension(format!(
            "example has {} tokens, model expects {l}",
            ex.tokens.len()
        )));
    }
    let m = sample_mask(rng, l);
    let dropped = rng.gen_bool(config.condition_dropout);
    let mode = if dropped {
        CfgMode::Unconditional
    } else {
        CfgMode::Conditional
    };
    let control = match config.stage {
        Stage::Pretrain => None,
        Stage::Adapt => Some(if config.shuffle_slots {
            let mut order: Vec<usize> = (0..ex.control.slots()).collect();
            order.shuffle(rng);
            ex.control.permute_slots(&order)
        } else {
            ex.control.clone()
        }),
    };
    let input: Vec<usize> = ex
        .tokens
        .iter()
        .zip(&m.mask)
        .map(|(&t, &masked)| if masked { state.config.mask_id() } else { t })
        .collect();
    let mut g = Graph::new(&state.store, config.stage.groups());
    let ctx = state.encode_conditions(&mut g, &ex.prompt, control.as_ref(), mode)?;
    let logits = state.forward_logits(&mut g, &input, &ctx)?;
    let loss = g.masked_cross_entropy(logits, &ex.tokens, &m.mask)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads, m.count(), dropped))
}

/// One optimizer step over `batch`, updating only the stage's group.
pub fn train_step(
    state: &mut ModelState,
    optimizer: &mut AdamW,
    batch: &[&TrainExample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if config.stage == Stage::Adapt && state.conditioning.is_none() {
        return Err(Error::Config(
            "adapt stage needs a model with control layers (attach them to a pretrained checkpoint)"
                .into(),
        ));
    }
    let mut total = Gradients::default();
    let (mut loss, mut masked, mut drops) = (0.0, 0usize, 0usize);
    for ex in batch {
        let (l, grads, count, dropped) = sample_gradients(state, ex, config, rng)?;
        total.accumulate(&grads, 1.0 / batch.len() as f64);
        loss += l;
        masked += count;
        drops += dropped as usize;
    }
    optimizer.step(&mut state.store, &total, config.stage.groups());
    let n = batch.len() as f64;
    Ok(StepStats {
        loss: loss / n,
        masked_count: masked as f64 / n,
        dropout_flag_rate: drops as f64 / n,
    })
}

/// Random stream for `step`; depends only on the seed and the step index,
/// so a resumed run replays the same batches and masks.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64))
}

/// Where a run writes its checkpoint and metrics.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    /// Newline-delimited JSON, appended to on resume.
    pub metrics: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunMeta {
    step: usize,
    stage: Stage,
    seed: u64,
}

#[derive(Serialize)]
struct MetricsLine {
    step: usize,
    loss: f64,
    masked_count: f64,
    dropout_flag_rate: f64,
    trainable_fraction: f64,
    samples_per_sec: f64,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub losses: Vec<f64>,
    pub steps_done: usize,
}

fn snapshot(state: &ModelState, opt: &AdamW, meta: &RunMeta) -> TrainSnapshot {
    TrainSnapshot {
        meta: serde_json::to_value(meta).expect("meta serializes"),
        moments: opt
            .state()
            .iter()
            .map(|(id, m)| (state.store.get(*id).name.clone(), m.clone()))
            .collect(),
    }
}

fn restore(state: &ModelState, opt: &mut AdamW, snap: &TrainSnapshot, config: &TrainConfig) -> Result<usize> {
    let meta: RunMeta = serde_json::from_value(snap.meta.clone())
        .map_err(|e| Error::Format(format!("training metadata: {e}")))?;
    if meta.stage != config.stage || meta.seed != config.seed {
        return Err(Error::Config(format!(
            "checkpoint was written by a {:?} run with seed {}, not {:?} with seed {}",
            meta.stage, meta.seed, config.stage, config.seed
        )));
    }
    for (name, m) in &snap.moments {
        let id = state
            .store
            .find(name)
            .ok_or_else(|| Error::Format(format!("moment for unknown parameter {name}")))?;
        opt.set_state(
            id,
            MomentState {
                step: m.step,
                m: m.m.clone(),
                v: m.v.clone(),
            },
        );
    }
    Ok(meta.step)
}

/// Runs `config.steps` steps, checkpointing periodically. With `resume`
/// the run continues from the snapshot's step and optimizer state.
pub fn run_training(
    mut state: ModelState,
    examples: &[TrainExample],
    config: &TrainConfig,
    paths: &RunPaths,
    resume: Option<&TrainSnapshot>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut opt = config.optimizer()?;
    let start = match resume {
        Some(snap) => restore(&state, &mut opt, snap, config)?,
        None => 0,
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&paths.metrics)
        .map_err(|e| Error::io(&paths.metrics, e))?;
    let fraction = trainable_fraction(&state);
    let mut losses = Vec::with_capacity(config.steps.saturating_sub(start));
    for step in start..config.steps {
        let t0 = Instant::now();
        let mut rng = step_rng(config.seed, step);
        let batch: Vec<&TrainExample> = (0..config.batch_size)
            .map(|_| &examples[rng.gen_range(0..examples.len())])
            .collect();
        let stats = train_step(&mut state, &mut opt, &batch, config, &mut rng)?;
        losses.push(stats.loss);
        let line = MetricsLine {
            step: step + 1,
            loss: stats.loss,
            masked_count: stats.masked_count,
            dropout_flag_rate: stats.dropout_flag_rate,
            trainable_fraction: fraction,
            samples_per_sec: config.batch_size as f64 / t0.elapsed().as_secs_f64().max(1e-9),
        };
        let json = serde_json::to_string(&line).expect("metrics serialize");
        writeln!(log, "{json}").map_err(|e| Error::io(&paths.metrics, e))?;
        let done = step + 1;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == config.steps {
            let meta = RunMeta {
                step: done,
                stage: config.stage,
                seed: config.seed,
            };
            save_checkpoint(&paths.checkpoint, &state, Some(&snapshot(&state, &opt, &meta)))?;
        }
    }
    Ok(TrainOutcome {
        state,
        losses,
        steps_done: config.steps.max(start),
    })
}

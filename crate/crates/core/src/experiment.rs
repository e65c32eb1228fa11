//! Controllability experiment: pretrain a text-only model, adapt it on the
//! same records with entity control, then compare both on held-out requests.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, EvalReport, PairedDifference};
use crate::inference::{iterative_decode, DecodeConfig};
use crate::model::{attach_control, build_model, trainable_fraction, ModelConfig, ModelState};
use crate::synthworld::{build_dataset, derive_seed, DatasetRecord, RequestedEntity, SynthConfig, Vocabulary};
use crate::tokenizer::{decode_tokens, encode_video, VideoClip};
use crate::training::{prepare_examples, run_training, RunPaths, Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub train_records: usize,
    pub heldout_records: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Sized to finish in under an hour on one CPU core.
    pub fn desk() -> Self {
        let mut model = ModelConfig::desk();
        model.blocks = 2;
        model.width = 64;
        model.heads = 4;
        model.conditioning.appearance_tokens = 2;
        model.conditioning.encoder_blocks = 1;
        let train = |stage, steps, lr| TrainConfig {
            lr,
            batch_size: 16,
            steps,
            checkpoint_every: 0,
            seed: 11,
            ..TrainConfig::desk(stage)
        };
        ExperimentConfig {
            synth: SynthConfig::default(),
            model,
            pretrain: train(Stage::Pretrain, 1200, 1e-3),
            adapt: train(Stage::Adapt, 1800, 3e-3),
            train_records: 5000,
            heldout_records: 200,
            decode: DecodeConfig {
                steps: 8,
                ..DecodeConfig::default()
            },
            seed: 2024,
        }
    }
}

/// Held-out requests and the ground truth they came from.
pub struct HeldOut {
    pub records: Vec<DatasetRecord>,
    pub requested: Vec<Vec<RequestedEntity>>,
    /// Ground truth passed through the tokenizer.
    pub reference: Vec<VideoClip>,
}

impl HeldOut {
    pub fn from_records(records: Vec<DatasetRecord>, bins: usize) -> Result<Self> {
        let vocab = Vocabulary::default();
        let requested = records.iter().map(|r| r.requested_entities(&vocab, bins)).collect();
        let reference = records
            .iter()
            .map(|r| Ok(decode_tokens(&encode_video(&r.clip)?)))
            .collect::<Result<_>>()?;
        Ok(HeldOut {
            records,
            requested,
            reference,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: EvalReport,
    pub adapted: EvalReport,
    /// Adapted AP over baseline AP; infinite when the baseline is 0.
    pub ap_ratio: f64,
    /// Adapted minus baseline appearance similarity, per request.
    pub appearance_gain: PairedDifference,
    pub trainable_fraction: f64,
    pub pretrain_final_loss: f64,
    pub adapt_final_loss: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(50)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Training and held-out records from disjoint seed streams.
pub fn experiment_data(config: &ExperimentConfig) -> Result<(Vec<DatasetRecord>, HeldOut)> {
    let vocab = Vocabulary::default();
    let train = build_dataset(derive_seed(config.seed, 0), config.train_records, &config.synth, &vocab)?;
    let records = build_dataset(derive_seed(config.seed, 1), config.heldout_records, &config.synth, &vocab)?;
    Ok((train, HeldOut::from_records(records, config.synth.bins)?))
}

/// Pretrains, adapts and returns (text-only model, adapted model, losses).
pub fn train_pair(
    config: &ExperimentConfig,
    train: &[DatasetRecord],
    workdir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(ModelState, ModelState, f64, f64)> {
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let examples = prepare_examples(train)?;
    let mut text_cfg = config.model.clone();
    text_cfg.control_enabled = false;
    let text = build_model(&text_cfg, derive_seed(config.seed, 2))?;
    log(&format!("pretraining {} steps", config.pretrain.steps));
    let pre = run_training(
        text,
        &examples,
        &config.pretrain,
        &RunPaths {
            checkpoint: workdir.join("pretrain.fckp"),
            metrics: workdir.join("pretrain.ndjson"),
        },
        None,
    )?;
    let pre_loss = tail_mean(&pre.losses);
    log(&format!("pretrain loss {pre_loss:.4}"));
    let control = attach_control(&pre.state, derive_seed(config.seed, 3))?;
    log(&format!("adapting {} steps", config.adapt.steps));
    let adapted = run_training(
        control,
        &examples,
        &config.adapt,
        &RunPaths {
            checkpoint: workdir.join("adapt.fckp"),
            metrics: workdir.join("adapt.ndjson"),
        },
        None,
    )?;
    let adapt_loss = tail_mean(&adapted.losses);
    log(&format!("adapt loss {adapt_loss:.4}"));
    Ok((pre.state, adapted.state, pre_loss, adapt_loss))
}

/// Decodes every held-out request with `model`; control is used only when
/// the model has control layers.
pub fn generate_heldout(model: &ModelState, heldout: &HeldOut, decode: &DecodeConfig, seed: u64) -> Result<Vec<VideoClip>> {
    heldout
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let control = match model.conditioning {
                Some(_) => Some(r.control_grid(r.clip.palette_size())?),
                None => None,
            };
            let config = DecodeConfig {
                seed: derive_seed(seed, i as u64),
                ..*decode
            };
            Ok(decode_tokens(&iterative_decode(model, &r.prompt, control.as_ref(), &config)?))
        })
        .collect()
}

/// Generates every held-out request with `model` and scores the result.
pub fn evaluate_model(model: &ModelState, heldout: &HeldOut, decode: &DecodeConfig, seed: u64) -> Result<EvalReport> {
    let clips = generate_heldout(model, heldout, decode, seed)?;
    evaluate(&clips, &heldout.requested, &heldout.reference)
}

/// Seed of the held-out decodes in an experiment.
pub fn decode_seed(config: &ExperimentConfig) -> u64 {
    derive_seed(config.seed, 4)
}

/// Scores both models on the held-out set.
pub fn compare(
    baseline: &ModelState,
    adapted: &ModelState,
    heldout: &HeldOut,
    config: &ExperimentConfig,
) -> Result<(EvalReport, EvalReport, PairedDifference)> {
    let seed = decode_seed(config);
    let base = evaluate_model(baseline, heldout, &config.decode, seed)?;
    let adapt = evaluate_model(adapted, heldout, &config.decode, seed)?;
    let (a, b): (Vec<f64>, Vec<f64>) = adapt
        .per_clip_similarity
        .iter()
        .zip(&base.per_clip_similarity)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    let gain = PairedDifference::new(&a, &b)?;
    Ok((base, adapt, gain))
}

pub fn run_experiment(config: &ExperimentConfig, workdir: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    let (train, heldout) = experiment_data(config)?;
    let (text, adapted, pre_loss, adapt_loss) = train_pair(config, &train, workdir, log)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (baseline, adapted_report, gain) = compare(&text, &adapted, &heldout, config)?;
    let eval_seconds = t1.elapsed().as_secs_f64();
    let ap_ratio = if baseline.ap_at_iou50 > 0.0 {
        adapted_report.ap_at_iou50 / baseline.ap_at_iou50
    } else if adapted_report.ap_at_iou50 > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(ExperimentReport {
        baseline,
        adapted: adapted_report,
        ap_ratio,
        appearance_gain: gain,
        trainable_fraction: trainable_fraction(&adapted),
        pretrain_final_loss: pre_loss,
        adapt_final_loss: adapt_loss,
        train_seconds,
        eval_seconds,
    })
}

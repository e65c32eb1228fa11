//! Classifier-free guidance and the cosine commit schedule, traced step by
//! step on a small model.

use factor_core::conditioning::ControlGrid;
use factor_core::inference::{cfg_logits, decode_with_trace, masked_schedule, DecodeConfig};
use factor_core::model::{build_model, CfgMode, ModelConfig};
use factor_core::synthworld::Vocabulary;

fn main() -> factor_core::Result<()> {
    let model = build_model(&ModelConfig::compact(), 2)?;
    let cc = &model.config.conditioning;
    let prompt = Vocabulary::default().tokenize("a red circle and a blue square", cc.prompt_len)?;
    let control = ControlGrid::empty(cc.timesteps, cc.slots, cc.appearance_raw_len);
    let tokens = vec![model.config.mask_id(); model.seq_len()];

    let cond = model.logits(&tokens, &prompt, Some(&control), CfgMode::Conditional)?;
    let uncond = model.logits(&tokens, &prompt, Some(&control), CfgMode::Unconditional)?;
    println!("s = 0 gives the unconditional logits: {}", cfg_logits(&cond, &uncond, 0.0)? == uncond);
    println!("s = 1 gives the conditional logits:   {}", cfg_logits(&cond, &uncond, 1.0)? == cond);
    let guided = cfg_logits(&cond, &uncond, 3.0)?;
    let shift: f64 = guided.data().iter().zip(cond.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / guided.len() as f64;
    println!("s = 3 moves logits by {shift:.4} on average");

    let decode = DecodeConfig {
        steps: 8,
        ..DecodeConfig::default()
    };
    println!("\nplanned masked counts: {:?}", masked_schedule(model.seq_len(), decode.steps));
    let trace = decode_with_trace(&model, &prompt, Some(&control), &decode, &vec![None; model.seq_len()])?;
    println!("observed masked counts: {:?}", trace.masked_counts);
    Ok(())
}

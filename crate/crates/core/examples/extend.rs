//! Longer clips by extension: each new window re-uses the last three
//! timesteps of the previous one as fixed context.

use factor_core::conditioning::NormBox;
use factor_core::inference::{generate, DecodeConfig, EntityRequest, GenerationRequest, OVERLAP_TIMESTEPS};
use factor_core::model::{build_model, ModelConfig};
use factor_core::synthworld::{swatch_catalog, Vocabulary};
use factor_core::tokenizer::Frame;

fn main() -> factor_core::Result<()> {
    let model = build_model(&ModelConfig::compact(), 1)?;
    let vocab = Vocabulary::default();
    let swatch = swatch_catalog(4).into_iter().find(|s| s.id == "green-square").expect("swatch");
    let request = GenerationRequest {
        prompt: vocab.tokenize("a green square moving", model.config.conditioning.prompt_len)?,
        entities: vec![EntityRequest {
            description_id: vocab.id("square").expect("shape word"),
            first_box: NormBox::new(0.0, 0.3, 0.3, 0.6),
            last_box: NormBox::new(0.3, 0.3, 0.6, 0.6),
            reference: Frame::new(swatch.rows, swatch.cols, swatch.cells.clone())?,
        }],
        decode: DecodeConfig {
            steps: 6,
            seed: 3,
            ..DecodeConfig::default()
        },
        extensions: 2,
    };
    let generation = generate(&model, &request)?;
    println!("{} windows, {} frames", generation.windows.len(), generation.clip.len());
    let t = model.config.timesteps;
    for pair in generation.windows.windows(2) {
        let same = (0..OVERLAP_TIMESTEPS).all(|k| pair[1].timestep(k) == pair[0].timestep(t - OVERLAP_TIMESTEPS + k));
        println!("overlap timesteps carried over unchanged: {same}");
    }
    for w in 0..=request.extensions {
        let b = request.box_at(0, w, 0, t);
        println!("window {w} starts the entity at {:.2?}", b.coords());
    }
    Ok(())
}

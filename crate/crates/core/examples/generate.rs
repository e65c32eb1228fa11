//! Generate a clip from a JSON request: a prompt plus one entity with a box
//! trajectory and a reference swatch.
//!
//! cargo run --release --example generate -- [checkpoint.fckp]
//!
//! Without a checkpoint a freshly initialised compact model is used, so the
//! frames are noise; train one with the `train` example first.

use factor_core::inference::{generate, parse_request, RequestContext};
use factor_core::model::{build_model, load_checkpoint, ModelConfig};
use factor_core::synthworld::{swatch_catalog, Vocabulary};
use factor_core::tokenizer::Frame;

const REQUEST: &str = r#"{
  "prompt": "a blue circle moving",
  "entities": [
    {"description": "circle", "first_box": [0.0, 0.0, 0.4, 0.4],
     "last_box": [0.6, 0.6, 1.0, 1.0], "reference": "blue-circle"}
  ],
  "decode": {"steps": 12, "guidance_scale": 2.0, "seed": 7}
}"#;

fn ascii(frame: &Frame) -> String {
    (0..frame.height())
        .map(|r| (0..frame.width()).map(|c| char::from(b".123456789abcdefghijk"[frame.get(r, c) as usize % 21])).collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() -> factor_core::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?.0,
        None => build_model(&ModelConfig::compact(), 0)?,
    };
    let vocab = Vocabulary::default();
    let swatches = swatch_catalog(4);
    let cfg = &model.config;
    let ctx = RequestContext {
        vocab: &vocab,
        swatches: &swatches,
        palette_size: cfg.vocab,
        prompt_len: cfg.conditioning.prompt_len,
        slots: cfg.conditioning.slots,
        max_extensions: 4,
    };
    let wire = parse_request(REQUEST).expect("request parses");
    let request = wire.resolve(&ctx).expect("request resolves");
    let generation = generate(&model, &request)?;
    let clip = &generation.clip;
    for f in [0, clip.len() / 2, clip.len() - 1] {
        println!("frame {f}:\n{}\n", ascii(clip.frame(f)));
    }
    let path = std::env::temp_dir().join("factor-generate-example.fclp");
    std::fs::write(&path, clip.to_bytes()).expect("write clip");
    println!("{} frames written to {}", clip.len(), path.display());
    Ok(())
}

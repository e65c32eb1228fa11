//! Two-stage training on a small dataset: pretrain a text-only model, then
//! attach the control layers and adapt them with the backbone frozen.
//!
//! cargo run --release --example train -- [steps] [out_dir]

use std::path::PathBuf;

use factor_core::model::{attach_control, build_model, load_checkpoint, trainable_fraction, ModelConfig};
use factor_core::synthworld::{build_dataset, SynthConfig, Vocabulary};
use factor_core::training::{prepare_examples, run_training, RunPaths, Stage, TrainConfig};

fn main() -> factor_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(40, |a| a.parse().expect("steps"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("factor-train-example"), PathBuf::from);
    std::fs::create_dir_all(&out).expect("output dir");

    let records = build_dataset(1, 256, &SynthConfig::default(), &Vocabulary::default())?;
    let examples = prepare_examples(&records)?;
    let mut cfg = ModelConfig::compact();
    cfg.control_enabled = false;

    let train = |stage| TrainConfig {
        steps,
        batch_size: 8,
        lr: 3e-3,
        checkpoint_every: 0,
        ..TrainConfig::desk(stage)
    };
    let paths = |name: &str| RunPaths {
        checkpoint: out.join(format!("{name}.fckp")),
        metrics: out.join(format!("{name}.ndjson")),
    };

    let pre = run_training(build_model(&cfg, 7)?, &examples, &train(Stage::Pretrain), &paths("pretrain"), None)?;
    println!("pretrain loss {:.4} -> {:.4}", pre.losses[0], pre.losses[steps - 1]);

    let control = attach_control(&pre.state, 8)?;
    let adapted = run_training(control, &examples, &train(Stage::Adapt), &paths("adapt"), None)?;
    println!("adapt loss    {:.4} -> {:.4}", adapted.losses[0], adapted.losses[steps - 1]);
    println!("trainable fraction during adaptation: {:.3}", trainable_fraction(&adapted.state));

    let (reloaded, _) = load_checkpoint(&out.join("adapt.fckp"))?;
    assert_eq!(reloaded.store, adapted.state.store);
    println!("checkpoints and metrics in {}", out.display());
    Ok(())
}

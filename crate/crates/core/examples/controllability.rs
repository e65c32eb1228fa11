//! The controllability experiment: pretrain text-only, adapt with entity
//! control, then compare both on held-out requests.
//!
//! cargo run --release --example controllability -- [--quick] [workdir]
//!
//! The full run takes most of an hour on one core; `--quick` shrinks every
//! stage to show the pipeline in a few minutes (its numbers mean little).

use std::path::PathBuf;
use std::time::Instant;

use factor_core::experiment::{decode_seed, run_experiment, ExperimentConfig};
use factor_core::synthworld::derive_seed;

fn main() -> factor_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let workdir = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map_or_else(|| std::env::temp_dir().join("factor-experiment"), PathBuf::from);
    let mut config = ExperimentConfig::desk();
    if quick {
        config.train_records = 400;
        config.heldout_records = 20;
        config.pretrain.steps = 60;
        config.adapt.steps = 60;
    }
    let t0 = Instant::now();
    let report = run_experiment(&config, &workdir, &mut |m| println!("[{:>5.0}s] {m}", t0.elapsed().as_secs_f64()))?;
    println!("baseline: {}", report.baseline.summary());
    println!("adapted:  {}", report.adapted.summary());
    println!("AP ratio {:.2}", report.ap_ratio);
    let g = &report.appearance_gain;
    println!("appearance gain {:.4} +/- {:.4} over {} requests", g.mean, g.std_err, g.n);
    println!("trainable fraction {:.3}", report.trainable_fraction);
    println!("report: {}", serde_json::to_string_pretty(&report).expect("json"));

    let d = &config.decode;
    println!("\nthe adapted numbers again, from the command line:");
    println!("  factor dataset --seed {} --count {} --out heldout", derive_seed(config.seed, 1), config.heldout_records);
    println!(
        "  factor eval --data heldout --checkpoint {} --steps {} --guidance-scale {} --temperature {} --seed {} --out adapted.json",
        workdir.join("adapt.fckp").display(),
        d.steps,
        d.guidance_scale,
        d.temperature,
        decode_seed(&config)
    );
    Ok(())
}

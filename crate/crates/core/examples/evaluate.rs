//! Score clips against requests: the oracle detector, trajectory AP,
//! appearance similarity and the Fréchet feature distance.

use factor_core::evalsuite::{evaluate, oracle_detect};
use factor_core::experiment::HeldOut;
use factor_core::synthworld::{build_dataset, SynthConfig, Vocabulary};

fn main() -> factor_core::Result<()> {
    let config = SynthConfig::default();
    let records = build_dataset(5, 24, &config, &Vocabulary::default())?;
    let heldout = HeldOut::from_records(records, config.bins)?;

    for d in oracle_detect(heldout.reference[0].frame(0)) {
        println!("detected color {} shape {:?} at {:.2?}", d.color, d.shape, d.bbox.coords());
    }

    let perfect = evaluate(&heldout.reference, &heldout.requested, &heldout.reference)?;
    println!("\nground truth vs itself:\n  {}", perfect.summary());

    // Pair every request with the clip of the next record.
    let mut shifted = heldout.reference.clone();
    shifted.rotate_left(1);
    let mismatched = evaluate(&shifted, &heldout.requested, &heldout.reference)?;
    println!("clips paired with the wrong requests:\n  {}", mismatched.summary());
    Ok(())
}

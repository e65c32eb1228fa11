//! Frames to tokens and back: the first frame is its own timestep, later
//! frames pair up.

use factor_core::synthworld::{build_record, SynthConfig, Vocabulary};
use factor_core::tokenizer::{decode_tokens, encode_video, frames_for_timesteps, timestep_of_frame, timesteps_for_frames};

fn main() -> factor_core::Result<()> {
    for frames in [1, 3, 11, 17] {
        println!("{frames:>2} frames -> {} timesteps", timesteps_for_frames(frames));
    }
    println!("6 timesteps -> {} frames", frames_for_timesteps(6));
    println!(
        "frame -> timestep: {:?}",
        (0..11).map(timestep_of_frame).collect::<Vec<_>>()
    );

    let record = build_record(3, &SynthConfig::default(), &Vocabulary::default())?;
    let grid = encode_video(&record.clip)?;
    println!(
        "encoded {} frames into a {}x{}x{} grid of {} tokens",
        record.clip.len(),
        grid.timesteps(),
        grid.height(),
        grid.width(),
        grid.len()
    );
    let back = decode_tokens(&grid);
    let same = (0..back.len()).filter(|&f| back.frame(f) == record.clip.frame(f)).count();
    println!("{same}/{} frames survive the round trip unchanged", back.len());
    assert_eq!(encode_video(&back)?, grid);
    Ok(())
}

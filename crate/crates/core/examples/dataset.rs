//! Build a few synthetic records, print their captions and a frame, and
//! round-trip them through the binary record file.
//!
//! cargo run --example dataset -- [count] [seed]

use factor_core::synthworld::{build_dataset, read_records, write_records, SynthConfig, Vocabulary};
use factor_core::tokenizer::Frame;

fn ascii(frame: &Frame) -> String {
    const GLYPHS: &[u8] = b".123456789abcdefghijklmnopqrstuvwxyz";
    let mut s = String::new();
    for r in 0..frame.height() {
        for c in 0..frame.width() {
            s.push(GLYPHS[frame.get(r, c) as usize % GLYPHS.len()] as char);
        }
        s.push('\n');
    }
    s
}

fn main() -> factor_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(4, |a| a.parse().expect("count"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    let config = SynthConfig::default();
    let vocab = Vocabulary::default();
    let records = build_dataset(seed, count, &config, &vocab)?;
    for (i, r) in records.iter().enumerate() {
        let entities = r.requested_entities(&vocab, config.bins);
        println!("#{i} \"{}\" ({} entities)", vocab.detokenize(&r.prompt), entities.len());
        for e in &entities {
            let b = &e.boxes[0];
            println!("   slot {} color {} shape {:?} first box {:.2?}", e.slot, e.color, e.shape, b.coords());
        }
    }
    if let Some(r) = records.first() {
        println!("\nfirst frame of record 0:\n{}", ascii(r.clip.frame(0)));
    }

    let dir = std::env::temp_dir().join("factor-dataset-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("records.frec");
    write_records(&path, &records)?;
    let back = read_records(&path)?;
    assert_eq!(back, records);
    println!("round-tripped {} records through {}", back.len(), path.display());
    Ok(())
}

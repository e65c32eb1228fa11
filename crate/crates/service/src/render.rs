//! Palette frames to PNG.

use factor_core::synthworld::rgb;
use factor_core::tokenizer::{Frame, VideoClip};

pub const DEFAULT_SCALE: u32 = 16;

fn encode_rgb(width: u32, height: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("writing to a Vec cannot fail");
        w.write_image_data(pixels).expect("pixel buffer matches the header");
    }
    out
}

fn paint(frame: &Frame, scale: usize, stride: usize, x0: usize, pixels: &mut [u8]) {
    for r in 0..frame.height() {
        for c in 0..frame.width() {
            let color = rgb(frame.get(r, c));
            for dy in 0..scale {
                let row = (r * scale + dy) * stride;
                for dx in 0..scale {
                    let p = (row + x0 + c * scale + dx) * 3;
                    pixels[p..p + 3].copy_from_slice(&color);
                }
            }
        }
    }
}

/// One frame with every cell drawn as a `scale x scale` block.
pub fn frame_png(frame: &Frame, scale: u32) -> Vec<u8> {
    let s = scale.max(1) as usize;
    let (w, h) = (frame.width() * s, frame.height() * s);
    let mut pixels = vec![0u8; w * h * 3];
    paint(frame, s, w, 0, &mut pixels);
    encode_rgb(w as u32, h as u32, &pixels)
}

/// All frames side by side, separated by a one-pixel white gap.
pub fn strip_png(clip: &VideoClip, scale: u32) -> Vec<u8> {
    let s = scale.max(1) as usize;
    let (fw, h) = (clip.width() * s, clip.height() * s);
    let n = clip.len();
    let w = n * fw + n.saturating_sub(1);
    let mut pixels = vec![255u8; w * h * 3];
    for (i, frame) in clip.frames().iter().enumerate() {
        paint(frame, s, w, i * (fw + 1), &mut pixels);
    }
    encode_rgb(w as u32, h as u32, &pixels)
}

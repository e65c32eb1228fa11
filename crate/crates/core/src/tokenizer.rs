//! Palette-identity video tokenizer.
//!
//! Frame 0 becomes token timestep 0; every following pair of frames
//! `{2i-1, 2i}` becomes timestep `i`, represented by its first frame. Token
//! values are the palette indices themselves, so the tokenizer is exactly
//! invertible on clips that are constant within each pair.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;

/// Number of token timesteps produced for a clip of `frames` frames.
pub fn timesteps_for_frames(frames: usize) -> usize {
    1 + (frames.saturating_sub(1)) / 2
}

/// Number of frames produced when decoding `timesteps` token timesteps.
pub fn frames_for_timesteps(timesteps: usize) -> usize {
    2 * timesteps.saturating_sub(1) + 1
}

/// Token timestep that frame `f` decodes from.
pub fn timestep_of_frame(f: usize) -> usize {
    (f + 1) / 2
}

/// Frame that represents token timestep `t`.
pub fn representative_frame(t: usize) -> usize {
    if t == 0 {
        0
    } else {
        2 * t - 1
    }
}

/// Grid of palette indices; index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Dimension(format!(
                "frame {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            cells,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Frame {
            height,
            width,
            cells: vec![BACKGROUND; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.cells[row * self.width + col] = value;
    }

    /// Sub-grid `rows x cols` starting at (`top`, `left`), clipped to the frame.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Frame> {
        let bottom = (top + rows).min(self.height);
        let right = (left + cols).min(self.width);
        if top >= bottom || left >= right {
            return Err(Error::Validation(format!(
                "zero-area crop at ({top}, {left}) size {rows}x{cols}"
            )));
        }
        let mut cells = Vec::with_capacity((bottom - top) * (right - left));
        for r in top..bottom {
            cells.extend_from_slice(&self.cells[r * self.width + left..r * self.width + right]);
        }
        Frame::new(bottom - top, right - left, cells)
    }

    pub fn is_background(&self) -> bool {
        self.cells.iter().all(|&c| c == BACKGROUND)
    }

    pub fn max_index(&self) -> u8 {
        self.cells.iter().copied().max().unwrap_or(0)
    }
}

/// Ordered frames sharing one size and palette.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    palette_size: usize,
    /// Nominal frame rate; not part of the file format.
    pub fps_label: f64,
}

pub const DEFAULT_FPS: f64 = 8.0;

impl VideoClip {
    pub fn new(frames: Vec<Frame>, palette_size: usize) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Validation("a clip needs at least one frame".into()))?;
        let (h, w) = (first.height, first.width);
        for (i, f) in frames.iter().enumerate() {
            if f.height != h || f.width != w {
                return Err(Error::Dimension(format!(
                    "frame {i} is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
            if f.max_index() as usize >= palette_size {
                return Err(Error::Validation(format!(
                    "frame {i} uses palette index {} >= {palette_size}",
                    f.max_index()
                )));
            }
        }
        Ok(VideoClip {
            frames,
            palette_size,
            fps_label: DEFAULT_FPS,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn palette_size(&self) -> usize {
        self.palette_size
    }

    /// Contiguous sub-span of frames.
    pub fn span(&self, start: usize, len: usize) -> Result<VideoClip> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::Validation(format!(
                "span {start}..{} outside clip of {} frames",
                start + len,
                self.frames.len()
            )));
        }
        VideoClip::new(self.frames[start..start + len].to_vec(), self.palette_size)
    }

    /// Concatenates `other` after `self`.
    pub fn append(&mut self, other: &VideoClip) -> Result<()> {
        if other.height() != self.height() || other.width() != self.width() {
            return Err(Error::Dimension("clip sizes differ".into()));
        }
        self.frames.extend(other.frames.iter().cloned());
        Ok(())
    }

    const MAGIC: &'static [u8; 4] = b"FCLP";
    const VERSION: u16 = 1;

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        for v in [self.len(), self.height(), self.width(), self.palette_size] {
            w.write_all(&(v as u16).to_le_bytes())?;
        }
        for f in &self.frames {
            w.write_all(&f.cells)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * self.height() * self.width());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated clip: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format(format!("bad clip magic {magic:?}")));
        }
        let mut buf = [0u8; 2];
        let mut read_u16 = |r: &mut dyn Read| -> Result<u16> {
            r.read_exact(&mut buf).map_err(fmt)?;
            Ok(u16::from_le_bytes(buf))
        };
        let version = read_u16(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported clip version {version}")));
        }
        let f = read_u16(&mut r)? as usize;
        let h = read_u16(&mut r)? as usize;
        let w = read_u16(&mut r)? as usize;
        let k = read_u16(&mut r)? as usize;
        let mut frames = Vec::with_capacity(f);
        for _ in 0..f {
            let mut cells = vec![0u8; h * w];
            r.read_exact(&mut cells).map_err(fmt)?;
            frames.push(Frame::new(h, w, cells)?);
        }
        VideoClip::new(frames, k)
    }
}

/// Discrete tokens on a `timesteps x height x width` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    timesteps: usize,
    height: usize,
    width: usize,
    vocab: usize,
    tokens: Vec<u16>,
}

impl TokenGrid {
    pub fn new(
        timesteps: usize,
        height: usize,
        width: usize,
        vocab: usize,
        tokens: Vec<u16>,
    ) -> Result<Self> {
        if tokens.len() != timesteps * height * width {
            return Err(Error::Dimension(format!(
                "token grid {timesteps}x{height}x{width} needs {} tokens, got {}",
                timesteps * height * width,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Validation(format!(
                "token {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(TokenGrid {
            timesteps,
            height,
            width,
            vocab,
            tokens,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, t: usize, h: usize, w: usize) -> u16 {
        self.tokens[self.position_of(t, h, w)]
    }

    /// Index of (t, h, w) in the flattened sequence.
    pub fn position_of(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.height + h) * self.width + w
    }

    /// Inverse of [`TokenGrid::position_of`].
    pub fn coords_of(&self, pos: usize) -> (usize, usize, usize) {
        let per_t = self.height * self.width;
        (pos / per_t, (pos % per_t) / self.width, pos % self.width)
    }

    /// Row-major sequence: timestep, then row, then column.
    pub fn flatten(&self) -> Vec<u16> {
        self.tokens.clone()
    }

    pub fn unflatten(
        seq: &[u16],
        timesteps: usize,
        height: usize,
        width: usize,
        vocab: usize,
    ) -> Result<Self> {
        if seq.len() != timesteps * height * width {
            return Err(Error::Dimension(format!(
                "sequence of {} tokens cannot form a {timesteps}x{height}x{width} grid",
                seq.len()
            )));
        }
        TokenGrid::new(timesteps, height, width, vocab, seq.to_vec())
    }

    /// Tokens of timestep `t`, row-major.
    pub fn timestep(&self, t: usize) -> &[u16] {
        let per_t = self.height * self.width;
        &self.tokens[t * per_t..(t + 1) * per_t]
    }
}

pub fn encode_video(clip: &VideoClip) -> Result<TokenGrid> {
    if clip.len() % 2 == 0 {
        return Err(Error::UnsupportedLength(clip.len()));
    }
    let t_count = timesteps_for_frames(clip.len());
    let mut tokens = Vec::with_capacity(t_count * clip.height() * clip.width());
    for t in 0..t_count {
        tokens.extend(
            clip.frame(representative_frame(t))
                .cells()
                .iter()
                .map(|&c| c as u16),
        );
    }
    TokenGrid::new(
        t_count,
        clip.height(),
        clip.width(),
        clip.palette_size(),
        tokens,
    )
}

pub fn decode_tokens(grid: &TokenGrid) -> VideoClip {
    let n_frames = frames_for_timesteps(grid.timesteps());
    let frames = (0..n_frames)
        .map(|f| {
            let cells = grid
                .timestep(timestep_of_frame(f))
                .iter()
                .map(|&t| t as u8)
                .collect();
            Frame::new(grid.height(), grid.width(), cells).expect("grid dims are consistent")
        })
        .collect();
    VideoClip::new(frames, grid.vocab()).expect("tokens are within the palette")
}

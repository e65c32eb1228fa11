//! Synthetic "moving shapes" world.
//!
//! Scenes are colored squares, circles and triangles moving on straight
//! lines over a long span of frames. Because the geometry is known, the
//! detector and tracker that would normally produce annotations are
//! emulated exactly: boxes come from geometry, trajectories are ordered by
//! visible pixel coverage, and heavily overlapping smaller tracks are
//! dropped.

mod caption;
mod io;
mod palette;

pub use caption::{build_caption, caption_text, Vocabulary, PAD};
pub use io::{read_records, write_records};
pub use palette::{color_index, color_name, rgb, swatch_catalog, Shape, Swatch, NAMED_COLORS};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    dequantize_box, extract_appearance_feature, quantize_box, ControlGrid, EntityControl, NormBox,
    PromptTokens,
};
use crate::error::{Error, Result};
use crate::tokenizer::{representative_frame, timesteps_for_frames, Frame, VideoClip, BACKGROUND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub palette_size: usize,
    pub train_frames: usize,
    pub long_frames: usize,
    /// Relative weight of each entity count; index is the count.
    pub entity_count_weights: Vec<f64>,
    /// Inclusive range of entity extents, in cells.
    pub size_range: (usize, usize),
    /// Trajectories kept per record.
    pub max_slots: usize,
    /// Mean IoU above which a smaller trajectory is dropped.
    pub overlap_iou: f64,
    /// Largest IoU allowed between two entities at the first training frame.
    pub max_start_overlap: f64,
    /// Fraction of records whose entities do not move (still images).
    pub image_fraction: f64,
    pub placement_retries: usize,
    pub prompt_len: usize,
    pub bins: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 8,
            width: 8,
            palette_size: 64,
            train_frames: 11,
            long_frames: 40,
            entity_count_weights: vec![0.05, 0.4, 0.35, 0.15, 0.05],
            size_range: (3, 4),
            max_slots: 4,
            overlap_iou: 0.7,
            max_start_overlap: 0.25,
            image_fraction: 0.2,
            placement_retries: 100,
            prompt_len: 16,
            bins: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.entity_count_weights.is_empty()
            || self.entity_count_weights.iter().any(|w| !(*w >= 0.0))
            || self.entity_count_weights.iter().sum::<f64>() <= 0.0
        {
            return err("entity count weights must be non-negative with a positive sum".into());
        }
        if self.entity_count_weights.len() - 1 > self.max_slots {
            return err(format!(
                "entity counts up to {} exceed the {} control slots",
                self.entity_count_weights.len() - 1,
                self.max_slots
            ));
        }
        if self.entity_count_weights.len() - 1 > NAMED_COLORS.len() {
            return err("more entities than distinct colors".into());
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi || hi > self.height || hi > self.width {
            return err(format!("size range {lo}..={hi} does not fit the frame"));
        }
        if self.train_frames == 0 || self.train_frames > self.long_frames {
            return err("training span must lie inside the long span".into());
        }
        if self.train_frames % 2 == 0 {
            return err("training span must have an odd frame count".into());
        }
        if !(0.0..=1.0).contains(&self.image_fraction) {
            return err("image fraction must be in [0, 1]".into());
        }
        if (NAMED_COLORS.iter().map(|c| c.1).max().unwrap() as usize) >= self.palette_size {
            return err("palette too small for the named colors".into());
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        timesteps_for_frames(self.train_frames)
    }
}

/// What an entity looks like.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub shape: Shape,
    pub color: u8,
    /// (width, height) in cells.
    pub size: (usize, usize),
}

/// An entity and its top-left corner (in cells) at the first and last
/// frame of the long span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntity {
    pub spec: EntitySpec,
    pub start: (f64, f64),
    pub end: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub entities: Vec<ScriptEntity>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub palette_size: usize,
    pub long_frames: usize,
    pub train_start: usize,
    pub train_frames: usize,
    pub is_image: bool,
}

impl SceneScript {
    /// Continuous top-left (x, y) of entity `e` at long-span frame `f`.
    pub fn position(&self, e: usize, f: usize) -> (f64, f64) {
        let ent = &self.entities[e];
        let a = if self.long_frames > 1 {
            f as f64 / (self.long_frames - 1) as f64
        } else {
            0.0
        };
        (
            ent.start.0 + (ent.end.0 - ent.start.0) * a,
            ent.start.1 + (ent.end.1 - ent.start.1) * a,
        )
    }

    /// Exact geometric box, before rasterization.
    pub fn analytic_box(&self, e: usize, f: usize) -> NormBox {
        let (x, y) = self.position(e, f);
        let (w, h) = self.entities[e].spec.size;
        NormBox::new(
            x / self.width as f64,
            y / self.height as f64,
            (x + w as f64) / self.width as f64,
            (y + h as f64) / self.height as f64,
        )
    }

    /// Integer (row, col) where the entity is drawn.
    pub fn raster_origin(&self, e: usize, f: usize) -> (usize, usize) {
        let (x, y) = self.position(e, f);
        let (w, h) = self.entities[e].spec.size;
        let col = (x.round().max(0.0) as usize).min(self.width - w);
        let row = (y.round().max(0.0) as usize).min(self.height - h);
        (row, col)
    }

    /// Analytic box after rasterization rounding (cell aligned).
    pub fn raster_box(&self, e: usize, f: usize) -> NormBox {
        let (row, col) = self.raster_origin(e, f);
        let (w, h) = self.entities[e].spec.size;
        NormBox::new(
            col as f64 / self.width as f64,
            row as f64 / self.height as f64,
            (col + w) as f64 / self.width as f64,
            (row + h) as f64 / self.height as f64,
        )
    }

    /// Frame `f` of the long span plus, per cell, the entity drawn there.
    pub fn render_with_owners(&self, f: usize) -> (Frame, Vec<Option<usize>>) {
        let mut frame = Frame::background(self.height, self.width);
        let mut owners = vec![None; self.height * self.width];
        for (i, ent) in self.entities.iter().enumerate() {
            let (row, col) = self.raster_origin(i, f);
            let (w, h) = ent.spec.size;
            let mask = ent.spec.shape.mask(h, w);
            for r in 0..h {
                for c in 0..w {
                    if mask[r * w + c] {
                        frame.set(row + r, col + c, ent.spec.color);
                        owners[(row + r) * self.width + col + c] = Some(i);
                    }
                }
            }
        }
        (frame, owners)
    }

    /// Cells of entity `e` visible at long-span frame `f`.
    pub fn visible_cells(&self, e: usize, f: usize) -> usize {
        self.render_with_owners(f)
            .1
            .iter()
            .filter(|o| **o == Some(e))
            .count()
    }

    pub fn train_span(&self) -> std::ops::Range<usize> {
        self.train_start..self.train_start + self.train_frames
    }
}

/// Mixes a base seed with an index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_count(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate_scene(seed: u64, config: &SynthConfig) -> Result<SceneScript> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = sample_count(&mut rng, &config.entity_count_weights);
    let is_image = rng.gen_bool(config.image_fraction);
    let train_start = rng.gen_range(0..=config.long_frames - config.train_frames);
    let mut colors: Vec<u8> = NAMED_COLORS.iter().map(|c| c.1).collect();
    colors.shuffle(&mut rng);

    // Entities are placed one at a time; each gets its own retry budget and
    // a scene that cannot fit the last entity starts over.
    let overlap_ok = |script: &SceneScript, e: usize| {
        (0..e).all(|o| {
            script.raster_box(o, train_start).iou(&script.raster_box(e, train_start))
                <= config.max_start_overlap
        })
    };
    for _ in 0..config.placement_retries.max(1) {
        let mut script = SceneScript {
            entities: Vec::with_capacity(count),
            seed,
            height: config.height,
            width: config.width,
            palette_size: config.palette_size,
            long_frames: config.long_frames,
            train_start,
            train_frames: config.train_frames,
            is_image,
        };
        for &color in colors.iter().take(count) {
            for _ in 0..config.placement_retries.max(1) {
                let (lo, hi) = config.size_range;
                let size = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
                let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
                let mut corner = || {
                    (
                        rng.gen_range(0.0..=(config.width - size.0) as f64),
                        rng.gen_range(0.0..=(config.height - size.1) as f64),
                    )
                };
                let start = corner();
                let end = if is_image { start } else { corner() };
                script.entities.push(ScriptEntity {
                    spec: EntitySpec { shape, color, size },
                    start,
                    end,
                });
                if overlap_ok(&script, script.entities.len() - 1) {
                    break;
                }
                script.entities.pop();
            }
        }
        if script.entities.len() == count {
            return Ok(script);
        }
    }
    Err(Error::Generation(format!(
        "no placement of {count} entities found in {} attempts (seed {seed})",
        config.placement_retries
    )))
}

/// All frames of the long span.
pub fn render_frames(script: &SceneScript) -> VideoClip {
    let frames = (0..script.long_frames)
        .map(|f| script.render_with_owners(f).0)
        .collect();
    VideoClip::new(frames, script.palette_size).expect("rendered frames share one size")
}

/// One tracked entity over the control timesteps of the training span.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryAnnotation {
    pub entity_index: usize,
    pub boxes: Vec<NormBox>,
    pub presence: Vec<bool>,
    /// Visible cells summed over the training span.
    pub coverage: usize,
}

/// Emulated detector + tracker over the training span of `clip`.
pub fn extract_annotations(
    script: &SceneScript,
    clip: &VideoClip,
    config: &SynthConfig,
) -> Result<Vec<TrajectoryAnnotation>> {
    if clip.len() != script.train_frames
        || clip.height() != script.height
        || clip.width() != script.width
    {
        return Err(Error::Dimension(format!(
            "clip of {} frames ({}x{}) was not rendered from this script",
            clip.len(),
            clip.height(),
            clip.width()
        )));
    }
    let t_count = timesteps_for_frames(script.train_frames);
    let owners: Vec<Vec<Option<usize>>> = script
        .train_span()
        .map(|f| script.render_with_owners(f).1)
        .collect();
    let visible = |e: usize, local: usize| owners[local].iter().filter(|o| **o == Some(e)).count();

    let mut tracks: Vec<TrajectoryAnnotation> = (0..script.entities.len())
        .map(|e| TrajectoryAnnotation {
            entity_index: e,
            boxes: (0..t_count)
                .map(|t| script.analytic_box(e, script.train_start + representative_frame(t)))
                .collect(),
            presence: (0..t_count)
                .map(|t| visible(e, representative_frame(t)) > 0)
                .collect(),
            coverage: (0..script.train_frames).map(|f| visible(e, f)).sum(),
        })
        .filter(|t| t.coverage > 0 && t.presence.iter().any(|&p| p))
        .collect();
    tracks.sort_by(|a, b| b.coverage.cmp(&a.coverage).then(a.entity_index.cmp(&b.entity_index)));

    let mut kept: Vec<TrajectoryAnnotation> = Vec::new();
    for cand in tracks {
        let overlaps = kept.iter().any(|k| {
            let mean: f64 = k
                .boxes
                .iter()
                .zip(&cand.boxes)
                .map(|(a, b)| a.iou(b))
                .sum::<f64>()
                / t_count as f64;
            mean > config.overlap_iou
        });
        if !overlaps {
            kept.push(cand);
        }
    }
    kept.truncate(config.max_slots);
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCrop {
    pub crop: Frame,
    pub source_frame: usize,
    /// The entity was not visible outside the training span, so the crop
    /// comes from inside it.
    pub fallback: bool,
}

/// Crops the entity from a random long-span frame outside the training span.
pub fn sample_reference_crop(
    script: &SceneScript,
    entity_index: usize,
    rng: &mut impl Rng,
) -> Result<ReferenceCrop> {
    let span = script.train_span();
    let visible: Vec<usize> = (0..script.long_frames)
        .filter(|&f| script.visible_cells(entity_index, f) > 0)
        .collect();
    let outside: Vec<usize> = visible.iter().copied().filter(|f| !span.contains(f)).collect();
    let (pool, fallback) = if outside.is_empty() {
        (visible, true)
    } else {
        (outside, false)
    };
    let &f = pool.choose(rng).ok_or_else(|| {
        Error::Validation(format!("entity {entity_index} is never visible"))
    })?;
    let (frame, _) = script.render_with_owners(f);
    let (row, col) = script.raster_origin(entity_index, f);
    let (w, h) = script.entities[entity_index].spec.size;
    Ok(ReferenceCrop {
        crop: frame.crop(row, col, h, w)?,
        source_frame: f,
        fallback,
    })
}

/// One training triplet: prompt, per-entity control, and the video.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub prompt: PromptTokens,
    pub timesteps: usize,
    pub slots: usize,
    /// `timesteps x slots`, timestep-major.
    pub presence: Vec<bool>,
    pub boxes: Vec<[usize; 4]>,
    pub descriptions: Vec<usize>,
    pub crops: Vec<Option<Frame>>,
    pub crop_fallback: Vec<bool>,
    pub clip: VideoClip,
}

/// What a record asks for, per slot, in evaluable form.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestedEntity {
    pub slot: usize,
    pub color: u8,
    pub shape: Option<Shape>,
    pub boxes: Vec<NormBox>,
    pub presence: Vec<bool>,
    pub reference: Frame,
}

impl DatasetRecord {
    /// Conditioning grid with appearance features extracted from the crops.
    pub fn control_grid(&self, palette_size: usize) -> Result<ControlGrid> {
        let feat_len = crate::conditioning::appearance_feature_len(palette_size);
        let mut grid = ControlGrid::empty(self.timesteps, self.slots, feat_len);
        for n in 0..self.slots {
            let Some(crop) = &self.crops[n] else { continue };
            let appearance = extract_appearance_feature(crop, palette_size)?;
            for t in 0..self.timesteps {
                let i = t * self.slots + n;
                if self.presence[i] {
                    grid.set(
                        t,
                        n,
                        EntityControl {
                            description_id: self.descriptions[n],
                            box_ids: self.boxes[i],
                            appearance: appearance.clone(),
                        },
                    );
                }
            }
        }
        Ok(grid)
    }

    /// Slots with a reference crop, with dequantized boxes and the
    /// dominant crop color as the expected category.
    pub fn requested_entities(&self, vocab: &Vocabulary, bins: usize) -> Vec<RequestedEntity> {
        (0..self.slots)
            .filter_map(|n| {
                let crop = self.crops[n].as_ref()?;
                Some(RequestedEntity {
                    slot: n,
                    color: dominant_color(crop)?,
                    shape: vocab.shape_of(self.descriptions[n]),
                    boxes: (0..self.timesteps)
                        .map(|t| dequantize_box(&self.boxes[t * self.slots + n], bins))
                        .collect(),
                    presence: (0..self.timesteps)
                        .map(|t| self.presence[t * self.slots + n])
                        .collect(),
                    reference: crop.clone(),
                })
            })
            .collect()
    }
}

/// Most frequent non-background palette index.
pub fn dominant_color(frame: &Frame) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &c in frame.cells() {
        if c != BACKGROUND {
            counts[c as usize] += 1;
        }
    }
    let (idx, &n) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(idx as u8)
}

/// Builds a complete record from a seed.
pub fn build_record(seed: u64, config: &SynthConfig, vocab: &Vocabulary) -> Result<DatasetRecord> {
    let script = generate_scene(seed, config)?;
    build_record_from_script(&script, config, vocab)
}

pub fn build_record_from_script(
    script: &SceneScript,
    config: &SynthConfig,
    vocab: &Vocabulary,
) -> Result<DatasetRecord> {
    let long = render_frames(script);
    let clip = long.span(script.train_start, script.train_frames)?;
    let tracks = extract_annotations(script, &clip, config)?;
    let t_count = config.timesteps();
    let slots = config.max_slots;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(script.seed, 0xC0FFEE));

    let mut presence = vec![false; t_count * slots];
    let mut boxes = vec![[0usize; 4]; t_count * slots];
    let mut descriptions = vec![PAD; slots];
    let mut crops = vec![None; slots];
    let mut crop_fallback = vec![false; slots];
    for (n, track) in tracks.iter().enumerate() {
        let e = track.entity_index;
        descriptions[n] = vocab.shape_id(script.entities[e].spec.shape);
        let reference = sample_reference_crop(script, e, &mut rng)?;
        crops[n] = Some(reference.crop);
        crop_fallback[n] = reference.fallback;
        for t in 0..t_count {
            presence[t * slots + n] = track.presence[t];
            boxes[t * slots + n] = quantize_box(&track.boxes[t], config.bins)?;
        }
    }
    Ok(DatasetRecord {
        prompt: build_caption(script, vocab, config.prompt_len)?,
        timesteps: t_count,
        slots,
        presence,
        boxes,
        descriptions,
        crops,
        crop_fallback,
        clip,
    })
}

/// `count` records whose seeds derive from `seed`.
pub fn build_dataset(seed: u64, count: usize, config: &SynthConfig, vocab: &Vocabulary) -> Result<Vec<DatasetRecord>> {
    (0..count)
        .map(|i| build_record(derive_seed(seed, i as u64), config, vocab))
        .collect()
}

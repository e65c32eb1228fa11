//! Prompt and entity-control encoding.
//!
//! Each present entity at each control timestep contributes a span of
//! `1 + 4 + appearance_tokens` embeddings: its description, its four box
//! coordinates, and a learned projection of a fixed appearance feature.
//! Absent slots contribute a learned padding vector instead. The prompt and
//! control sequences are then contextualized together by a small
//! self-attention encoder and split back apart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{param, EncoderBlock, Init, Linear};
use crate::numerics::{Graph, Group, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{Frame, BACKGROUND};

/// Box in normalized image coordinates: top-left `(x1, y1)`, bottom-right `(x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        NormBox { x1, y1, x2, y2 }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        NormBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.coords();
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("box {c:?} leaves [0, 1]")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Validation(format!("box {c:?} is not well ordered")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Cells covered by the box on a `height x width` grid:
    /// `(top, left, rows, cols)`, rounding outward.
    pub fn to_cells(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let snap = |v: f64, n: usize| {
            let s = v * n as f64;
            // Guard against values like 2.9999999 that are meant to be 3.
            if (s - s.round()).abs() < 1e-9 {
                s.round()
            } else {
                s
            }
        };
        let top = snap(self.y1, height).floor().max(0.0) as usize;
        let left = snap(self.x1, width).floor().max(0.0) as usize;
        let bottom = (snap(self.y2, height).ceil() as usize).min(height);
        let right = (snap(self.x2, width).ceil() as usize).min(width);
        (
            top.min(height),
            left.min(width),
            bottom.saturating_sub(top),
            right.saturating_sub(left),
        )
    }
}

/// Quantizes each coordinate to `min(floor(v * bins), bins - 1)`.
pub fn quantize_box(b: &NormBox, bins: usize) -> Result<[usize; 4]> {
    b.validate()?;
    let q = |v: f64| ((v * bins as f64).floor() as usize).min(bins - 1);
    Ok([q(b.x1), q(b.y1), q(b.x2), q(b.y2)])
}

/// Bin centers of a quantized box.
pub fn dequantize_box(ids: &[usize; 4], bins: usize) -> NormBox {
    let d = |i: usize| (i as f64 + 0.5) / bins as f64;
    NormBox::new(d(ids[0]), d(ids[1]), d(ids[2]), d(ids[3]))
}

/// Length of the raw appearance feature for a palette.
pub fn appearance_feature_len(palette_size: usize) -> usize {
    palette_size.div_ceil(4) + 16
}

/// Fixed appearance descriptor of a crop: a normalized histogram of
/// foreground colors over groups of four palette indices, followed by a
/// 4x4 nearest-sampled foreground occupancy mask.
pub fn extract_appearance_feature(crop: &Frame, palette_size: usize) -> Result<Vec<f64>> {
    let (h, w) = (crop.height(), crop.width());
    if h == 0 || w == 0 {
        return Err(Error::Validation("zero-area crop".into()));
    }
    let bins = palette_size.div_ceil(4);
    let mut hist = vec![0.0; bins];
    let mut fg = 0usize;
    for &c in crop.cells() {
        if c != BACKGROUND {
            hist[(c as usize / 4).min(bins - 1)] += 1.0;
            fg += 1;
        }
    }
    if fg > 0 {
        hist.iter_mut().for_each(|v| *v /= fg as f64);
    }
    for i in 0..4 {
        for j in 0..4 {
            let r = ((i as f64 + 0.5) * h as f64 / 4.0) as usize;
            let c = ((j as f64 + 0.5) * w as f64 / 4.0) as usize;
            hist.push(if crop.get(r.min(h - 1), c.min(w - 1)) != BACKGROUND {
                1.0
            } else {
                0.0
            });
        }
    }
    Ok(hist)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fixed-length prompt, padded with `pad_id`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptTokens {
    ids: Vec<usize>,
}

impl PromptTokens {
    pub fn new(ids: Vec<usize>, len: usize, pad_id: usize) -> Result<Self> {
        if ids.len() > len {
            return Err(Error::Validation(format!(
                "prompt of {} tokens exceeds length {len}",
                ids.len()
            )));
        }
        let mut ids = ids;
        ids.resize(len, pad_id);
        Ok(PromptTokens { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityControl {
    pub description_id: usize,
    pub box_ids: [usize; 4],
    pub appearance: Vec<f64>,
}

impl EntityControl {
    pub fn validate(&self, cfg: &ConditioningConfig) -> Result<()> {
        if self.description_id >= cfg.text_vocab {
            return Err(Error::Validation(format!(
                "description id {} outside vocabulary of {}",
                self.description_id, cfg.text_vocab
            )));
        }
        let [x1, y1, x2, y2] = self.box_ids;
        if self.box_ids.iter().any(|&b| b >= cfg.bins) || x1 > x2 || y1 > y2 {
            return Err(Error::Validation(format!(
                "quantized box {:?} invalid for {} bins",
                self.box_ids, cfg.bins
            )));
        }
        if self.appearance.len() != cfg.appearance_raw_len || self.appearance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "appearance feature must be {} finite values",
                cfg.appearance_raw_len
            )));
        }
        Ok(())
    }
}

/// `timesteps x slots` entity controls with a presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    timesteps: usize,
    slots: usize,
    entries: Vec<EntityControl>,
    presence: Vec<bool>,
}

impl ControlGrid {
    /// Grid with every slot absent.
    pub fn empty(timesteps: usize, slots: usize, appearance_len: usize) -> Self {
        let blank = EntityControl {
            description_id: 0,
            box_ids: [0; 4],
            appearance: vec![0.0; appearance_len],
        };
        ControlGrid {
            timesteps,
            slots,
            entries: vec![blank; timesteps * slots],
            presence: vec![false; timesteps * slots],
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn index(&self, t: usize, n: usize) -> usize {
        t * self.slots + n
    }

    pub fn entry(&self, t: usize, n: usize) -> &EntityControl {
        &self.entries[self.index(t, n)]
    }

    pub fn entry_mut(&mut self, t: usize, n: usize) -> &mut EntityControl {
        let i = self.index(t, n);
        &mut self.entries[i]
    }

    pub fn present(&self, t: usize, n: usize) -> bool {
        self.presence[self.index(t, n)]
    }

    pub fn set(&mut self, t: usize, n: usize, entry: EntityControl) {
        let i = self.index(t, n);
        self.entries[i] = entry;
        self.presence[i] = true;
    }

    pub fn clear(&mut self, t: usize, n: usize) {
        let i = self.index(t, n);
        self.presence[i] = false;
    }

    /// Reorders slots: new slot `n` takes old slot `order[n]`.
    pub fn permute_slots(&self, order: &[usize]) -> ControlGrid {
        let mut out = self.clone();
        for t in 0..self.timesteps {
            for (n, &src) in order.iter().enumerate() {
                let (dst, from) = (self.index(t, n), self.index(t, src));
                out.entries[dst] = self.entries[from].clone();
                out.presence[dst] = self.presence[from];
            }
        }
        out
    }

    pub fn validate(&self, cfg: &ConditioningConfig) -> Result<()> {
        if self.timesteps != cfg.timesteps || self.slots != cfg.slots {
            return Err(Error::Dimension(format!(
                "control grid {}x{} does not match configured {}x{}",
                self.timesteps, self.slots, cfg.timesteps, cfg.slots
            )));
        }
        for t in 0..self.timesteps {
            for n in 0..self.slots {
                if self.present(t, n) {
                    self.entry(t, n).validate(cfg)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub prompt_len: usize,
    pub text_vocab: usize,
    pub bins: usize,
    pub appearance_raw_len: usize,
    pub appearance_tokens: usize,
    pub slots: usize,
    pub timesteps: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
}

impl ConditioningConfig {
    /// Embeddings per entity span.
    pub fn span(&self) -> usize {
        1 + 4 + self.appearance_tokens
    }

    /// Control sequence length for one timestep.
    pub fn per_timestep(&self) -> usize {
        self.slots * self.span()
    }

    pub fn control_len(&self) -> usize {
        self.timesteps * self.per_timestep()
    }
}

/// Learned conditioning parameters (all in the adaptive group).
#[derive(Clone, Debug)]
pub struct ConditioningParams {
    pub config: ConditioningConfig,
    pub width: usize,
    pub description: ParamId,
    pub coords: ParamId,
    pub image_proj: Linear,
    pub padding: ParamId,
    pub timestep_pos: ParamId,
    pub slot_pos: ParamId,
    pub encoder: Vec<EncoderBlock>,
}

impl ConditioningParams {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &ConditioningConfig,
        width: usize,
        std: f64,
    ) -> Self {
        let g = Group::Adaptive;
        let description = param(store, rng, "cond.description", g, &[config.text_vocab, width], Init::Normal(std));
        let coords = store.insert("cond.coords", g, smooth_coordinate_table(rng, config.bins, width));
        let image_proj = Linear::new(
            store,
            rng,
            "cond.image_proj",
            g,
            (config.appearance_raw_len, config.appearance_tokens * width),
            Init::Normal(std),
        );
        let padding = param(store, rng, "cond.padding", g, &[1, width], Init::Normal(std));
        let timestep_pos = param(store, rng, "cond.timestep_pos", g, &[config.timesteps, width], Init::Normal(std));
        let slot_pos = param(store, rng, "cond.slot_pos", g, &[config.slots, width], Init::Normal(std));
        let encoder = (0..config.encoder_blocks)
            .map(|i| {
                EncoderBlock::new(store, rng, &format!("encoder.{i}"), g, width, config.encoder_heads, 4, std)
            })
            .collect();
        ConditioningParams {
            config: config.clone(),
            width,
            description,
            coords,
            image_proj,
            padding,
            timestep_pos,
            slot_pos,
            encoder,
        }
    }

    /// Embedding span of one entity: description, four coordinates, appearance.
    pub fn encode_entity(&self, g: &mut Graph<'_>, ec: &EntityControl) -> Result<Var> {
        ec.validate(&self.config)?;
        let desc_t = g.param(self.description);
        let desc = g.embedding(desc_t, &[ec.description_id])?;
        let coord_t = g.param(self.coords);
        let coord_ids = coordinate_rows(&ec.box_ids, self.config.bins);
        let coords = g.embedding(coord_t, &coord_ids)?;
        let raw = g.input(Tensor::new(vec![1, ec.appearance.len()], ec.appearance.clone())?);
        let img = self.image_proj.forward(g, raw)?;
        let img = g.reshape(img, &[self.config.appearance_tokens, self.width])?;
        g.concat_rows(&[desc, coords, img])
    }

    /// Control embeddings for the whole grid, timestep-major then slot.
    pub fn assemble_control_sequence(&self, g: &mut Graph<'_>, grid: &ControlGrid) -> Result<Var> {
        grid.validate(&self.config)?;
        let cfg = &self.config;
        let (span, at) = (cfg.span(), cfg.appearance_tokens);
        let present: Vec<(usize, usize)> = (0..grid.timesteps())
            .flat_map(|t| (0..grid.slots()).map(move |n| (t, n)))
            .filter(|&(t, n)| grid.present(t, n))
            .collect();
        let p = present.len();

        // Source rows: [descriptions (p) | coordinates (4p) | appearance (at*p) | padding (1)].
        let mut parts = Vec::new();
        if p > 0 {
            let desc_ids: Vec<usize> = present.iter().map(|&(t, n)| grid.entry(t, n).description_id).collect();
            let coord_ids: Vec<usize> = present
                .iter()
                .flat_map(|&(t, n)| coordinate_rows(&grid.entry(t, n).box_ids, cfg.bins))
                .collect();
            let raw: Vec<f64> = present
                .iter()
                .flat_map(|&(t, n)| grid.entry(t, n).appearance.iter().copied())
                .collect();
            let desc_t = g.param(self.description);
            parts.push(g.embedding(desc_t, &desc_ids)?);
            let coord_t = g.param(self.coords);
            parts.push(g.embedding(coord_t, &coord_ids)?);
            let raw = g.input(Tensor::new(vec![p, cfg.appearance_raw_len], raw)?);
            let img = self.image_proj.forward(g, raw)?;
            parts.push(g.reshape(img, &[p * at, self.width])?);
        }
        parts.push(g.param(self.padding));
        let source = g.concat_rows(&parts)?;
        let pad_row = p * (1 + 4 + at);

        let mut gather = Vec::with_capacity(cfg.control_len());
        let mut t_ids = Vec::with_capacity(cfg.control_len());
        let mut n_ids = Vec::with_capacity(cfg.control_len());
        let mut k = 0;
        for t in 0..grid.timesteps() {
            for n in 0..grid.slots() {
                if grid.present(t, n) {
                    gather.push(k);
                    gather.extend((0..4).map(|c| p + 4 * k + c));
                    gather.extend((0..at).map(|j| 5 * p + at * k + j));
                    k += 1;
                } else {
                    gather.extend(std::iter::repeat(pad_row).take(span));
                }
                t_ids.extend(std::iter::repeat(t).take(span));
                n_ids.extend(std::iter::repeat(n).take(span));
            }
        }
        let seq = g.embedding(source, &gather)?;
        let tp = g.param(self.timestep_pos);
        let tp = g.embedding(tp, &t_ids)?;
        let sp = g.param(self.slot_pos);
        let sp = g.embedding(sp, &n_ids)?;
        let seq = g.add(seq, tp)?;
        g.add(seq, sp)
    }

    /// Runs prompt and control through the shared encoder and splits the
    /// result back at the original boundary.
    pub fn joint_encode(&self, g: &mut Graph<'_>, prompt: Var, control: Var) -> Result<(Var, Var)> {
        let lp = g.value(prompt).rows();
        let lc = g.value(control).rows();
        let mut x = g.concat_rows(&[prompt, control])?;
        for block in &self.encoder {
            x = block.forward(g, x)?;
        }
        let p = g.slice_rows(x, 0..lp)?;
        let c = g.slice_rows(x, lp..lp + lc)?;
        Ok((p, c))
    }
}

/// Rows of the coordinate table for a quantized box: slot `k` owns rows
/// `k * bins .. (k + 1) * bins`.
pub fn coordinate_rows(box_ids: &[usize; 4], bins: usize) -> [usize; 4] {
    [box_ids[0], bins + box_ids[1], 2 * bins + box_ids[2], 3 * bins + box_ids[3]]
}

/// Coordinate embeddings start as low-frequency sinusoids of the bin
/// position, so neighbouring bins begin close together.
fn smooth_coordinate_table(rng: &mut impl Rng, bins: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(4 * bins * width);
    let phases: Vec<f64> = (0..4 * width)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    for slot in 0..4 {
        for b in 0..bins {
            let pos = (b as f64 + 0.5) / bins as f64;
            for j in 0..width {
                let freq = 1.0 + (j % 4) as f64;
                let phase = phases[slot * width + j];
                data.push(0.05 * (std::f64::consts::PI * freq * pos + phase).sin());
            }
        }
    }
    Tensor::new(vec![4 * bins, width], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_config() -> ConditioningConfig {
        ConditioningConfig {
            prompt_len: 16,
            text_vocab: 18,
            bins: 100,
            appearance_raw_len: 32,
            appearance_tokens: 8,
            slots: 4,
            timesteps: 6,
            encoder_blocks: 2,
            encoder_heads: 4,
        }
    }

    fn entity(seed: u64) -> EntityControl {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x1 = r.gen_range(0..50);
        let y1 = r.gen_range(0..50);
        EntityControl {
            description_id: r.gen_range(0..18),
            box_ids: [x1, y1, x1 + r.gen_range(0..50), y1 + r.gen_range(0..50)],
            appearance: (0..32).map(|_| r.gen_range(0.0..1.0)).collect(),
        }
    }

    fn params(width: usize) -> (ParamStore, ConditioningParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConditioningParams::build(&mut store, &mut rng, &test_config(), width, 0.02);
        (store, p)
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_box(&NormBox::new(0.0, 0.0, 1.0, 1.0), 100).unwrap(), [0, 0, 99, 99]);
        assert_eq!(
            quantize_box(&NormBox::new(0.5, 0.5, 0.75, 0.75), 100).unwrap(),
            [50, 50, 75, 75]
        );
        assert!(quantize_box(&NormBox::new(-0.1, 0.0, 0.5, 0.5), 100).is_err());
        assert!(quantize_box(&NormBox::new(0.6, 0.0, 0.5, 0.5), 100).is_err());
        assert!(quantize_box(&NormBox::new(0.0, 0.0, 0.5, 1.5), 100).is_err());
    }

    proptest! {
        #[test]
        fn dequantize_within_one_bin(x1 in 0.0..0.9f64, y1 in 0.0..0.9f64, dw in 0.01..0.1f64, dh in 0.01..0.1f64) {
            let b = NormBox::new(x1, y1, x1 + dw, y1 + dh);
            let back = dequantize_box(&quantize_box(&b, 100).unwrap(), 100);
            for (a, c) in b.coords().iter().zip(back.coords()) {
                prop_assert!((a - c).abs() <= 1.0 / 100.0);
            }
        }

        #[test]
        fn quantize_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assume!(lo < hi && hi < 1.0);
            let q1 = quantize_box(&NormBox::new(lo, lo, 1.0, 1.0), 100).unwrap();
            let q2 = quantize_box(&NormBox::new(hi, hi, 1.0, 1.0), 100).unwrap();
            prop_assert!(q1[0] <= q2[0] && q1[1] <= q2[1]);
            let q3 = quantize_box(&NormBox::new(0.0, 0.0, lo.max(1e-6), lo.max(1e-6)), 100).unwrap();
            let q4 = quantize_box(&NormBox::new(0.0, 0.0, hi, hi), 100).unwrap();
            prop_assert!(q3[2] <= q4[2] && q3[3] <= q4[3]);
        }
    }

    #[test]
    fn uniform_crop_feature() {
        let crop = Frame::new(3, 3, vec![12; 9]).unwrap();
        let f = extract_appearance_feature(&crop, 64).unwrap();
        assert_eq!(f.len(), 32);
        assert_eq!(appearance_feature_len(64), 32);
        let hist = &f[..16];
        assert_eq!(hist[3], 1.0);
        assert_eq!(hist.iter().sum::<f64>(), 1.0);
        assert!(f[16..].iter().all(|&v| v == 1.0));
        assert!(extract_appearance_feature(&Frame::new(0, 3, vec![]).unwrap(), 64).is_err());
    }

    #[test]
    fn entity_span_has_thirteen_vectors_and_isolates_box() {
        let (store, p) = params(16);
        let e = entity(1);
        let mut g = Graph::inference(&store);
        let a = p.encode_entity(&mut g, &e).unwrap();
        assert_eq!(g.value(a).shape(), &[13, 16]);
        let b = p.encode_entity(&mut g, &e).unwrap();
        assert_eq!(g.value(a), g.value(b));

        let mut moved = e.clone();
        moved.box_ids = [e.box_ids[0] + 1, e.box_ids[1] + 2, e.box_ids[2] + 1, e.box_ids[3] + 3];
        let c = p.encode_entity(&mut g, &moved).unwrap();
        for r in 0..13 {
            let same = g.value(a).row(r) == g.value(c).row(r);
            assert_eq!(same, !(1..=4).contains(&r), "row {r}");
        }
    }

    #[test]
    fn control_sequence_lengths() {
        let cfg = test_config();
        assert_eq!(cfg.span(), 13);
        assert_eq!(cfg.per_timestep(), 52);
        let full = ConditioningConfig {
            appearance_tokens: 50,
            ..cfg.clone()
        };
        assert_eq!(full.per_timestep(), 220);
        assert_eq!(full.span(), 55);
    }

    #[test]
    fn all_absent_grid_is_padding_plus_position() {
        let (store, p) = params(16);
        let grid = ControlGrid::empty(6, 4, 32);
        let mut g = Graph::inference(&store);
        let seq = p.assemble_control_sequence(&mut g, &grid).unwrap();
        let out = g.value(seq);
        assert_eq!(out.shape(), &[6 * 52, 16]);
        let pad = store.value(p.padding).data();
        for t in 0..6 {
            for n in 0..4 {
                for j in 0..13 {
                    let r = (t * 4 + n) * 13 + j;
                    for c in 0..16 {
                        let expect = pad[c] + store.value(p.timestep_pos).at(t, c) + store.value(p.slot_pos).at(n, c);
                        assert_eq!(out.at(r, c), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn present_slot_matches_encoded_entity() {
        let (store, p) = params(16);
        let mut grid = ControlGrid::empty(6, 4, 32);
        let e = entity(9);
        grid.set(2, 1, e.clone());
        let mut g = Graph::inference(&store);
        let seq = p.assemble_control_sequence(&mut g, &grid).unwrap();
        let span = p.encode_entity(&mut g, &e).unwrap();
        for j in 0..13 {
            let r = (2 * 4 + 1) * 13 + j;
            for c in 0..16 {
                let expect = g.value(span).at(j, c) + store.value(p.timestep_pos).at(2, c) + store.value(p.slot_pos).at(1, c);
                assert!((g.value(seq).at(r, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn absent_slot_contents_do_not_leak() {
        let (store, p) = params(16);
        let mut grid = ControlGrid::empty(6, 4, 32);
        for t in 0..6 {
            grid.set(t, 0, entity(t as u64));
            grid.set(t, 2, entity(100 + t as u64));
        }
        grid.clear(3, 2);
        let mut mutated = grid.clone();
        *mutated.entry_mut(3, 2) = entity(999);
        *mutated.entry_mut(0, 3) = entity(555);
        let mut g = Graph::inference(&store);
        let a = p.assemble_control_sequence(&mut g, &grid).unwrap();
        let b = p.assemble_control_sequence(&mut g, &mutated).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn joint_encoder_preserves_lengths_and_starts_as_identity() {
        let (store, p) = params(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::inference(&store);
        let prompt = g.input(init_tensor(&mut rng, &[16, 16], Init::Normal(1.0)));
        let control = g.input(init_tensor(&mut rng, &[312, 16], Init::Normal(1.0)));
        let (pc, cc) = p.joint_encode(&mut g, prompt, control).unwrap();
        assert_eq!(g.value(pc).shape(), &[16, 16]);
        assert_eq!(g.value(cc).shape(), &[312, 16]);
        assert_eq!(g.value(pc), g.value(prompt));
        assert_eq!(g.value(cc), g.value(control));
    }

    #[test]
    fn trained_encoder_cross_contextualizes() {
        let (mut store, p) = params(16);
        // Give the zero-initialized output projections some weight.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, prm)| prm.name.starts_with("encoder.") && prm.name.ends_with(".w"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = init_tensor(&mut rng, &shape, Init::Normal(0.2));
        }
        let prompt_t = init_tensor(&mut rng, &[16, 16], Init::Normal(1.0));
        let control_t = init_tensor(&mut rng, &[312, 16], Init::Normal(1.0));
        let mut control_b = control_t.clone();
        control_b.data_mut()[5 * 16 + 3] += 0.5;
        let mut g = Graph::inference(&store);
        let p1 = g.input(prompt_t.clone());
        let c1 = g.input(control_t);
        let (pa, _) = p.joint_encode(&mut g, p1, c1).unwrap();
        let p2 = g.input(prompt_t);
        let c2 = g.input(control_b);
        let (pb, _) = p.joint_encode(&mut g, p2, c2).unwrap();
        let delta: f64 = g
            .value(pa)
            .data()
            .iter()
            .zip(g.value(pb).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0);
    }
}

//! Oracle-detector metrics for generated clips: trajectory AP, appearance
//! similarity and a Fréchet distance over per-clip summary features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{cosine_similarity, extract_appearance_feature, NormBox};
use crate::error::{Error, Result};
use crate::synthworld::{RequestedEntity, Shape};
use crate::tokenizer::{representative_frame, timestep_of_frame, timesteps_for_frames, Frame, VideoClip, BACKGROUND};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Color histogram bins in the clip feature.
pub const FEATURE_COLOR_BINS: usize = 16;

/// One connected blob of a single color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: NormBox,
    pub color: u8,
    /// `None` when the blob matches no shape template.
    pub shape: Option<Shape>,
    pub cells: usize,
}

/// Detections for every frame of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub frames: Vec<Vec<Detection>>,
}

/// 4-connected components of equal non-background color, classified by
/// exact template match against every shape at the component's extent.
pub fn oracle_detect(frame: &Frame) -> Vec<Detection> {
    let (h, w) = (frame.height(), frame.width());
    let cells = frame.cells();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..h * w {
        let color = cells[start];
        if seen[start] || color == BACKGROUND {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        members.clear();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && cells[j] == color {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        let r0 = members.iter().map(|i| i / w).min().unwrap_or(0);
        let r1 = members.iter().map(|i| i / w).max().unwrap_or(0) + 1;
        let c0 = members.iter().map(|i| i % w).min().unwrap_or(0);
        let c1 = members.iter().map(|i| i % w).max().unwrap_or(0) + 1;
        let (rows, cols) = (r1 - r0, c1 - c0);
        let mut occupied = vec![false; rows * cols];
        for &i in &members {
            occupied[(i / w - r0) * cols + (i % w - c0)] = true;
        }
        let shape = Shape::ALL.into_iter().find(|s| s.mask(rows, cols) == occupied);
        out.push(Detection {
            bbox: NormBox::new(
                c0 as f64 / w as f64,
                r0 as f64 / h as f64,
                c1 as f64 / w as f64,
                r1 as f64 / h as f64,
            ),
            color,
            shape,
            cells: members.len(),
        });
    }
    out
}

pub fn detect_clip(clip: &VideoClip) -> DetectionResult {
    DetectionResult {
        frames: clip.frames().iter().map(oracle_detect).collect(),
    }
}

/// Frames standing for the middle and the last token timestep of a clip of
/// `frames` frames. Annotations are taken at these frames, and a decoded
/// clip repeats each one in the frame after it.
pub fn default_scored_frames(frames: usize) -> Vec<usize> {
    if frames == 0 {
        return Vec::new();
    }
    let t = timesteps_for_frames(frames);
    vec![representative_frame(t / 2), representative_frame(t - 1)]
}

fn requested_at(entity: &RequestedEntity, frame: usize) -> Option<&NormBox> {
    let t = timestep_of_frame(frame);
    (*entity.presence.get(t)? && t < entity.boxes.len()).then(|| &entity.boxes[t])
}

/// Matches and totals of one clip at the given frames.
pub fn trajectory_matches(
    generated: &VideoClip,
    requested: &[RequestedEntity],
    frames: &[usize],
) -> Result<(usize, usize)> {
    let (mut matched, mut total) = (0, 0);
    for &f in frames {
        if f >= generated.len() {
            return Err(Error::Index { id: f, len: generated.len() });
        }
        let dets = oracle_detect(generated.frame(f));
        for e in requested {
            let Some(want) = requested_at(e, f) else { continue };
            total += 1;
            let hit = dets.iter().any(|d| {
                d.color == e.color && shape_agrees(e.shape, d.shape) && d.bbox.iou(want) >= IOU_THRESHOLD
            });
            matched += usize::from(hit);
        }
    }
    Ok((matched, total))
}

/// A partly hidden entity matches no template, so an unclassified
/// detection does not contradict the requested shape.
fn shape_agrees(requested: Option<Shape>, detected: Option<Shape>) -> bool {
    match (requested, detected) {
        (Some(r), Some(d)) => r == d,
        _ => true,
    }
}

/// Fraction of requested entities found at their requested box with the
/// requested color and shape, pooled over the scored frames.
pub fn trajectory_ap(generated: &VideoClip, requested: &[RequestedEntity], frames: &[usize]) -> Result<f64> {
    let (m, n) = trajectory_matches(generated, requested, frames)?;
    if n == 0 {
        return Err(Error::UndefinedMetric("no requested entity is present in the scored frames".into()));
    }
    Ok(m as f64 / n as f64)
}

/// Box snapped to whole cells by rounding each edge.
pub fn round_to_cells(b: &NormBox, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let c = b.coords();
    let x1 = ((c[0] * width as f64).round().max(0.0) as usize).min(width);
    let y1 = ((c[1] * height as f64).round().max(0.0) as usize).min(height);
    let x2 = ((c[2] * width as f64).round().max(0.0) as usize).min(width);
    let y2 = ((c[3] * height as f64).round().max(0.0) as usize).min(height);
    (y1, x1, y2.saturating_sub(y1), x2.saturating_sub(x1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AppearanceScore {
    pub sum: f64,
    pub scored: usize,
    /// Crops that rounded to zero area.
    pub skipped: usize,
}

impl AppearanceScore {
    pub fn mean(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.sum / self.scored as f64)
    }

    pub fn merge(&mut self, other: &AppearanceScore) {
        self.sum += other.sum;
        self.scored += other.scored;
        self.skipped += other.skipped;
    }
}

/// Cosine similarity between the appearance feature of the generated frame
/// cropped at each requested box and that of the entity's reference crop.
pub fn appearance_similarity(
    generated: &VideoClip,
    requested: &[RequestedEntity],
    frames: &[usize],
) -> Result<AppearanceScore> {
    let palette = generated.palette_size();
    let mut score = AppearanceScore::default();
    for e in requested {
        let reference = extract_appearance_feature(&e.reference, palette)?;
        for &f in frames {
            if f >= generated.len() {
                return Err(Error::Index { id: f, len: generated.len() });
            }
            let Some(want) = requested_at(e, f) else { continue };
            let (top, left, rows, cols) = round_to_cells(want, generated.height(), generated.width());
            if rows == 0 || cols == 0 {
                score.skipped += 1;
                continue;
            }
            let crop = generated.frame(f).crop(top, left, rows, cols)?;
            score.sum += cosine_similarity(&extract_appearance_feature(&crop, palette)?, &reference);
            score.scored += 1;
        }
    }
    Ok(score)
}

/// Per-frame entity count, mean detected box area and a cumulative color
/// histogram, concatenated over frames.
pub fn clip_feature(clip: &VideoClip) -> Vec<f64> {
    let palette = clip.palette_size().max(1);
    let per_bin = palette.div_ceil(FEATURE_COLOR_BINS);
    let mut out = Vec::with_capacity(clip.len() * (2 + FEATURE_COLOR_BINS));
    for frame in clip.frames() {
        let dets = oracle_detect(frame);
        out.push(dets.len() as f64);
        out.push(if dets.is_empty() {
            0.0
        } else {
            dets.iter().map(|d| d.bbox.area()).sum::<f64>() / dets.len() as f64
        });
        let mut hist = [0.0; FEATURE_COLOR_BINS];
        let n = frame.cells().len() as f64;
        for &c in frame.cells() {
            if c != BACKGROUND {
                hist[(c as usize / per_bin).min(FEATURE_COLOR_BINS - 1)] += 1.0 / n;
            }
        }
        let mut acc = 0.0;
        for v in hist {
            acc += v;
            out.push(acc);
        }
    }
    out
}

fn mean_cov(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    (mean, cov)
}

/// Eigenvalues below a numerical-rank tolerance are treated as zero.
fn clamped_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = max * eig.eigenvalues.len() as f64 * f64::EPSILON;
    eig.eigenvalues.iter_mut().for_each(|v| {
        if *v < tol {
            *v = 0.0;
        }
    });
    eig
}

/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))` between Gaussian fits of
/// the two sets of feature vectors.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("each set needs at least 2 clips".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Dimension("feature vectors differ in length".into()));
    }
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let eig_a = clamped_eigen(cov_a.clone());
    let sqrt_a = &eig_a.eigenvectors
        * DMatrix::from_diagonal(&eig_a.eigenvalues.map(f64::sqrt))
        * eig_a.eigenvectors.transpose();
    // Tr((Sa Sb)^(1/2)) = Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), which is symmetric.
    let inner = clamped_eigen(&sqrt_a * &cov_b * &sqrt_a);
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

/// Fréchet distance between the [`clip_feature`]s of two clip sets.
pub fn frechet_feature_distance(a: &[VideoClip], b: &[VideoClip]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("each set needs at least 2 clips".into()));
    }
    let len = a[0].len();
    if a.iter().chain(b).any(|c| c.len() != len) {
        return Err(Error::Dimension("clips in a Fréchet comparison must share one length".into()));
    }
    let fa: Vec<Vec<f64>> = a.par_iter().map(clip_feature).collect();
    let fb: Vec<Vec<f64>> = b.par_iter().map(clip_feature).collect();
    frechet_distance(&fa, &fb)
}

/// Aggregate metrics of a generated corpus against its requests and the
/// ground-truth clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_at_iou50: f64,
    pub ap_mid_frame: f64,
    pub ap_last_frame: f64,
    pub appearance_similarity: f64,
    pub appearance_scored: usize,
    pub appearance_skipped: usize,
    pub frechet_feature_distance: f64,
    pub clip_count: usize,
    /// Per clip mean appearance similarity, `None` when nothing was scored.
    pub per_clip_similarity: Vec<Option<f64>>,
}

pub fn evaluate(
    generated: &[VideoClip],
    requests: &[Vec<RequestedEntity>],
    ground_truth: &[VideoClip],
) -> Result<EvalReport> {
    if generated.len() != requests.len() {
        return Err(Error::Dimension(format!(
            "{} clips for {} requests",
            generated.len(),
            requests.len()
        )));
    }
    let per_clip: Vec<Result<([(usize, usize); 3], AppearanceScore)>> = generated
        .par_iter()
        .zip(requests.par_iter())
        .map(|(clip, req)| {
            let frames = default_scored_frames(clip.len());
            let both = trajectory_matches(clip, req, &frames)?;
            let mid = trajectory_matches(clip, req, &frames[..1])?;
            let last = trajectory_matches(clip, req, &frames[1..])?;
            Ok(([both, mid, last], appearance_similarity(clip, req, &frames)?))
        })
        .collect();
    let mut counts = [(0usize, 0usize); 3];
    let mut appearance = AppearanceScore::default();
    let mut per_clip_similarity = Vec::with_capacity(per_clip.len());
    for r in per_clip {
        let (c, a) = r?;
        for (acc, v) in counts.iter_mut().zip(c) {
            acc.0 += v.0;
            acc.1 += v.1;
        }
        appearance.merge(&a);
        per_clip_similarity.push(a.mean());
    }
    let ratio = |(m, n): (usize, usize)| {
        if n == 0 {
            Err(Error::UndefinedMetric("no requested entity is present in the scored frames".into()))
        } else {
            Ok(m as f64 / n as f64)
        }
    };
    Ok(EvalReport {
        ap_at_iou50: ratio(counts[0])?,
        ap_mid_frame: ratio(counts[1])?,
        ap_last_frame: ratio(counts[2])?,
        appearance_similarity: appearance
            .mean()
            .ok_or_else(|| Error::UndefinedMetric("no appearance crop could be scored".into()))?,
        appearance_scored: appearance.scored,
        appearance_skipped: appearance.skipped,
        frechet_feature_distance: frechet_feature_distance(generated, ground_truth)?,
        clip_count: generated.len(),
        per_clip_similarity,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("eval report: {e}")))
    }

    /// One-line summary for the CLI.
    pub fn summary(&self) -> String {
        format!(
            "clips {} | AP@0.5 {:.4} (mid {:.4}, last {:.4}) | appearance {:.4} ({} scored, {} skipped) | Fréchet {:.4}",
            self.clip_count,
            self.ap_at_iou50,
            self.ap_mid_frame,
            self.ap_last_frame,
            self.appearance_similarity,
            self.appearance_scored,
            self.appearance_skipped,
            self.frechet_feature_distance
        )
    }
}

/// Mean paired difference `a - b` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl PairedDifference {
    pub fn new(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() || a.len() < 2 {
            return Err(Error::Validation("paired comparison needs two equal samples of size >= 2".into()));
        }
        let n = a.len();
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(PairedDifference {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        })
    }

    /// One-sided test that the mean difference is above zero by `sigmas`
    /// standard errors.
    pub fn exceeds_zero(&self, sigmas: f64) -> bool {
        self.mean > sigmas * self.std_err
    }
}

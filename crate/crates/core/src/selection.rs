//! Turning scored segments into a short ranked list of padded crops.
//!
//! Each segment gets three factors in `[0, 1]`: the fraction of its pixels
//! inside the saliency mask, the mean attribution over its pixels, and the
//! attribution at its snapped centroid. The score is their geometric mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionMap, SaliencyMask};
use crate::segmentation::{centroid_of, SegmentMask};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("dimension mismatch: segment {segment:?}, map {map:?}, saliency {saliency:?}")]
    DimensionMismatch {
        segment: (usize, usize),
        map: (usize, usize),
        saliency: (usize, usize),
    },
    #[error("dedup input is not sorted by score (desc) then segment id (asc) at position {0}")]
    UnsortedInput(usize),
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub segment_id: u32,
    pub overlap_factor: f64,
    pub mean_importance: f64,
    pub central_importance: f64,
    pub score: f64,
}

/// Inclusive pixel bounds of a crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub source_segment_id: u32,
    pub score: f64,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row0 <= self.row1 && self.col0 <= self.col1 && self.row1 < height && self.col1 < width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub s_min: f64,
    pub iou_threshold: f64,
    pub containment_threshold: f64,
    /// A contained candidate survives when the container is more than this
    /// many times its area.
    pub area_ratio_gate: f64,
    pub pad_fraction: f64,
    /// Keep at most this many crops per image; 0 disables the cap.
    pub max_elements: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            s_min: 0.2,
            iou_threshold: 0.7,
            containment_threshold: 0.85,
            area_ratio_gate: 3.0,
            pad_fraction: 0.1,
            max_elements: 10,
        }
    }
}

impl SelectionConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SelectionError::InvalidConfig(m.to_string()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.s_min.is_finite() {
            return bad("s_min must be finite");
        }
        if !unit(self.iou_threshold) {
            return bad("iou_threshold must lie in [0, 1]");
        }
        if !unit(self.containment_threshold) {
            return bad("containment_threshold must lie in [0, 1]");
        }
        if !(self.area_ratio_gate >= 1.0) {
            return bad("area_ratio_gate must be at least 1");
        }
        if !(self.pad_fraction >= 0.0 && self.pad_fraction.is_finite()) {
            return bad("pad_fraction must be a finite value >= 0");
        }
        Ok(())
    }
}

/// Cube root of the product, computed in log space. Any factor at or below
/// zero gives 0.
pub fn geometric_mean(factors: [f64; 3]) -> f64 {
    if factors.iter().any(|&f| f <= 0.0) {
        return 0.0;
    }
    let log_mean = factors.iter().map(|f| f.ln()).sum::<f64>() / 3.0;
    log_mean.exp().clamp(0.0, 1.0)
}

pub fn score_segment(segment: &SegmentMask, map: &AttributionMap, saliency: &SaliencyMask) -> Result<ScoredSegment> {
    let dims = segment.dims();
    if map.dims() != dims || saliency.dims() != dims {
        return Err(SelectionError::DimensionMismatch {
            segment: dims,
            map: map.dims(),
            saliency: saliency.dims(),
        });
    }
    let mask = segment.mask();
    let area = segment.area() as f64;
    let overlap_factor = mask.intersection_count(&saliency.mask) as f64 / area;
    let mean_importance = mask.ones().map(|p| map.get(p.row, p.col) as f64).sum::<f64>() / area;
    let c = centroid_of(mask).expect("segment masks are nonempty");
    let central_importance = map.get(c.row, c.col) as f64;
    Ok(ScoredSegment {
        segment_id: segment.segment_id(),
        overlap_factor,
        mean_importance,
        central_importance,
        score: geometric_mean([overlap_factor, mean_importance, central_importance]),
    })
}

/// Keeps entries with `score >= s_min`, in their original order.
pub fn filter_by_min_score<T: AsRef<ScoredSegment>>(scored: Vec<T>, s_min: f64) -> Vec<T> {
    scored.into_iter().filter(|s| s.as_ref().score >= s_min).collect()
}

impl AsRef<ScoredSegment> for ScoredSegment {
    fn as_ref(&self) -> &ScoredSegment {
        self
    }
}

/// A scored segment paired with its mask.
#[derive(Debug, Clone, Copy)]
pub struct Ranked<'a> {
    pub scored: ScoredSegment,
    pub segment: &'a SegmentMask,
}

impl AsRef<ScoredSegment> for Ranked<'_> {
    fn as_ref(&self) -> &ScoredSegment {
        &self.scored
    }
}

/// Score descending, then segment id ascending.
pub fn rank_order(a: &ScoredSegment, b: &ScoredSegment) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.segment_id.cmp(&b.segment_id))
}

/// Whether candidate `b` duplicates the already-kept `a`.
pub fn is_duplicate(a: &SegmentMask, b: &SegmentMask, config: &SelectionConfig) -> bool {
    let inter = a.mask().intersection_count(b.mask()) as f64;
    let (area_a, area_b) = (a.area() as f64, b.area() as f64);
    let iou = inter / (area_a + area_b - inter);
    let containment = inter / area_b;
    iou >= config.iou_threshold
        || (containment >= config.containment_threshold && area_a / area_b <= config.area_ratio_gate)
}

/// Greedy scan in rank order: a candidate is kept unless it duplicates some
/// already-kept segment.
pub fn dedup_containment_iou<'a>(ranked: Vec<Ranked<'a>>, config: &SelectionConfig) -> Result<Vec<Ranked<'a>>> {
    if let Some(i) = ranked
        .windows(2)
        .position(|w| rank_order(&w[0].scored, &w[1].scored) == std::cmp::Ordering::Greater)
    {
        return Err(SelectionError::UnsortedInput(i + 1));
    }
    let mut kept: Vec<Ranked<'a>> = Vec::new();
    for cand in ranked {
        if !kept.iter().any(|k| is_duplicate(k.segment, cand.segment, config)) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Tight bounding box grown by `ceil(pad_fraction * side)` on each edge,
/// clamped to the image.
pub fn to_padded_bbox(segment: &SegmentMask, score: f64, pad_fraction: f64) -> CropBox {
    let (h, w) = segment.dims();
    let (r0, c0, r1, c1) = segment.mask().bounding_box().expect("segment masks are nonempty");
    // the epsilon keeps products like 0.1 * 30 from rounding up to 4
    let pad = |len: usize| (pad_fraction * len as f64 - 1e-9).ceil().max(0.0) as usize;
    let (pr, pc) = (pad(r1 - r0 + 1), pad(c1 - c0 + 1));
    CropBox {
        row0: r0.saturating_sub(pr),
        col0: c0.saturating_sub(pc),
        row1: (r1 + pr).min(h - 1),
        col1: (c1 + pc).min(w - 1),
        source_segment_id: segment.segment_id(),
        score,
    }
}

/// One selected crop with the factor breakdown behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedElement {
    pub rank: usize,
    pub crop: CropBox,
    pub factors: ScoredSegment,
    pub segment_area: usize,
}

/// Score, filter, rank, deduplicate, pad, truncate.
pub fn select_elements(
    map: &AttributionMap,
    saliency: &SaliencyMask,
    segments: &[SegmentMask],
    config: &SelectionConfig,
) -> Result<Vec<SelectedElement>> {
    config.validate()?;
    let scored = segments
        .iter()
        .map(|s| {
            Ok(Ranked {
                scored: score_segment(s, map, saliency)?,
                segment: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ranked = filter_by_min_score(scored, config.s_min);
    ranked.sort_by(|a, b| rank_order(&a.scored, &b.scored));
    let mut kept = dedup_containment_iou(ranked, config)?;
    if config.max_elements > 0 {
        kept.truncate(config.max_elements);
    }
    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(rank, r)| SelectedElement {
            rank,
            crop: to_padded_bbox(r.segment, r.scored.score, config.pad_fraction),
            factors: r.scored,
            segment_area: r.segment.area(),
        })
        .collect())
}

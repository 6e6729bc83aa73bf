//! Deletion and insertion tests for selected crops, against a random-crop
//! baseline with matched box sizes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{predict_top1, ClassifierAdapter, ClassifierError};
use crate::config::derive_seed;
use crate::grid::BitGrid;
use crate::ingest::{model_input, ImageTensor, Normalization, PreprocessConfig};
use crate::selection::CropBox;

#[derive(Debug, Error)]
pub enum FaithfulnessError {
    #[error("box {row0},{col0}..{row1},{col1} lies outside a {height}x{width} image")]
    BoxOutOfBounds {
        row0: usize,
        col0: usize,
        row1: usize,
        col1: usize,
        height: usize,
        width: usize,
    },
    #[error("a {box_h}x{box_w} box cannot be placed in a {height}x{width} image")]
    BoxLargerThanImage {
        box_h: usize,
        box_w: usize,
        height: usize,
        width: usize,
    },
    #[error("fill color {0:?} is outside [0, 1]")]
    InvalidFill([f32; 3]),
    #[error("masking expects a raw [0,1] image")]
    NotRaw,
    #[error("no results to aggregate")]
    EmptyResults,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

pub type Result<T> = std::result::Result<T, FaithfulnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Fill the crops, keep the rest.
    Deletion,
    /// Keep the crops, fill the rest.
    Insertion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingSpec {
    pub boxes: Vec<CropBox>,
    pub mode: MaskMode,
    pub fill: [f32; 3],
}

/// Pixels covered by at least one box.
pub fn union_mask(boxes: &[CropBox], height: usize, width: usize) -> Result<BitGrid> {
    let mut grid = BitGrid::new(height, width);
    for b in boxes {
        if !b.fits(height, width) {
            return Err(FaithfulnessError::BoxOutOfBounds {
                row0: b.row0,
                col0: b.col0,
                row1: b.row1,
                col1: b.col1,
                height,
                width,
            });
        }
        for r in b.row0..=b.row1 {
            for c in b.col0..=b.col1 {
                grid.set(r, c, true);
            }
        }
    }
    Ok(grid)
}

/// Fraction of the image covered by the union of `boxes`.
pub fn coverage_fraction(boxes: &[CropBox], height: usize, width: usize) -> Result<f64> {
    Ok(union_mask(boxes, height, width)?.count_ones() as f64 / (height * width) as f64)
}

pub fn apply_masking(image: &ImageTensor, spec: &MaskingSpec) -> Result<ImageTensor> {
    if image.normalization != Normalization::Raw01 {
        return Err(FaithfulnessError::NotRaw);
    }
    if spec.fill.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(FaithfulnessError::InvalidFill(spec.fill));
    }
    let inside = union_mask(&spec.boxes, image.height, image.width)?;
    let fill_inside = spec.mode == MaskMode::Deletion;
    let mut out = image.clone();
    let plane = image.plane();
    for (i, &covered) in inside.bits().iter().enumerate() {
        if covered == fill_inside {
            for (c, &f) in spec.fill.iter().enumerate() {
                out.data[c * plane + i] = f;
            }
        }
    }
    Ok(out)
}

/// One box per guided box, same height and width, top-left drawn uniformly
/// from all valid positions.
pub fn random_crops_matched(guided: &[CropBox], height: usize, width: usize, seed: u64) -> Result<Vec<CropBox>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    guided
        .iter()
        .map(|g| {
            let (bh, bw) = (g.height(), g.width());
            if bh > height || bw > width {
                return Err(FaithfulnessError::BoxLargerThanImage {
                    box_h: bh,
                    box_w: bw,
                    height,
                    width,
                });
            }
            let row0 = rng.random_range(0..=height - bh);
            let col0 = rng.random_range(0..=width - bw);
            Ok(CropBox {
                row0,
                col0,
                row1: row0 + bh - 1,
                col1: col0 + bw - 1,
                source_segment_id: g.source_segment_id,
                score: 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Guided,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Per-channel mean of the image being masked.
    ImageMean,
    MidGray,
    /// The normalization mean from the preprocessing config.
    DatasetMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaithfulnessConfig {
    pub random_repeats: usize,
    pub fill: FillMode,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        Self {
            random_repeats: 10,
            fill: FillMode::ImageMean,
        }
    }
}

pub fn fill_color(mode: FillMode, image: &ImageTensor, preprocess: &PreprocessConfig) -> [f32; 3] {
    match mode {
        FillMode::ImageMean => image.channel_means().map(|v| v.clamp(0.0, 1.0)),
        FillMode::MidGray => [0.5; 3],
        FillMode::DatasetMean => preprocess.mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessResult {
    pub image_id: String,
    pub label: usize,
    pub pred_original: usize,
    pub pred_deletion: usize,
    pub pred_insertion: usize,
    pub condition: Condition,
    pub repeat_index: usize,
    pub coverage_fraction: f64,
}

/// Everything `evaluate_image` needs besides the image itself.
pub struct EvalContext<'a> {
    pub model: &'a dyn ClassifierAdapter,
    pub preprocess: &'a PreprocessConfig,
    pub config: &'a FaithfulnessConfig,
    pub run_seed: u64,
}

/// Seed for the `repeat`-th random draw on an image.
pub fn random_seed(run_seed: u64, image_id: &str, repeat: usize) -> u64 {
    derive_seed(run_seed, &format!("random-crops/{image_id}"), repeat as u64)
}

/// Deletion and insertion predictions for one box set.
pub fn evaluate_boxes(
    ctx: &EvalContext,
    raw: &ImageTensor,
    boxes: &[CropBox],
    fill: [f32; 3],
) -> Result<(usize, usize, f64)> {
    let predict = |mode| -> Result<usize> {
        let masked = apply_masking(
            raw,
            &MaskingSpec {
                boxes: boxes.to_vec(),
                mode,
                fill,
            },
        )?;
        Ok(predict_top1(ctx.model, &model_input(&masked, ctx.preprocess))?.0)
    };
    let coverage = coverage_fraction(boxes, raw.height, raw.width)?;
    Ok((predict(MaskMode::Deletion)?, predict(MaskMode::Insertion)?, coverage))
}

/// One guided result followed by `random_repeats` random results. An empty
/// guided list yields no results; callers count such images as excluded.
pub fn evaluate_image(
    ctx: &EvalContext,
    image_id: &str,
    label: usize,
    raw: &ImageTensor,
    guided: &[CropBox],
) -> Result<Vec<FaithfulnessResult>> {
    if guided.is_empty() {
        return Ok(Vec::new());
    }
    let pred_original = predict_top1(ctx.model, &model_input(raw, ctx.preprocess))?.0;
    let fill = fill_color(ctx.config.fill, raw, ctx.preprocess);
    let record = |condition, repeat_index, (pred_deletion, pred_insertion, coverage_fraction)| FaithfulnessResult {
        image_id: image_id.to_string(),
        label,
        pred_original,
        pred_deletion,
        pred_insertion,
        condition,
        repeat_index,
        coverage_fraction,
    };
    let mut out = vec![record(Condition::Guided, 0, evaluate_boxes(ctx, raw, guided, fill)?)];
    for repeat in 0..ctx.config.random_repeats {
        let seed = random_seed(ctx.run_seed, image_id, repeat);
        let boxes = random_crops_matched(guided, raw.height, raw.width, seed)?;
        out.push(record(
            Condition::Random,
            repeat,
            evaluate_boxes(ctx, raw, &boxes, fill)?,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub accuracy_original: f64,
    pub accuracy_deletion: f64,
    pub accuracy_insertion: f64,
    pub deletion_drop: f64,
    /// Agreement of masked predictions with the unmasked prediction.
    pub agreement_deletion: f64,
    pub agreement_insertion: f64,
    pub mean_coverage: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub guided: Option<ConditionReport>,
    pub random: Option<ConditionReport>,
    /// Images left out of both conditions, by reason.
    pub excluded: BTreeMap<String, usize>,
}

fn condition_report(results: &[&FaithfulnessResult]) -> Option<ConditionReport> {
    // average within each image first, then across images
    let mut per_image: BTreeMap<&str, Vec<&FaithfulnessResult>> = BTreeMap::new();
    for r in results {
        per_image.entry(r.image_id.as_str()).or_default().push(r);
    }
    if per_image.is_empty() {
        return None;
    }
    let mut sums = [0.0f64; 6];
    for rs in per_image.values() {
        let n = rs.len() as f64;
        let frac = |f: &dyn Fn(&FaithfulnessResult) -> bool| rs.iter().filter(|r| f(r)).count() as f64 / n;
        let means = [
            frac(&|r| r.pred_original == r.label),
            frac(&|r| r.pred_deletion == r.label),
            frac(&|r| r.pred_insertion == r.label),
            frac(&|r| r.pred_deletion == r.pred_original),
            frac(&|r| r.pred_insertion == r.pred_original),
            rs.iter().map(|r| r.coverage_fraction).sum::<f64>() / n,
        ];
        sums.iter_mut().zip(means).for_each(|(s, m)| *s += m);
    }
    let n = per_image.len() as f64;
    let [original, deletion, insertion, agree_del, agree_ins, coverage] = sums.map(|s| s / n);
    Some(ConditionReport {
        accuracy_original: original,
        accuracy_deletion: deletion,
        accuracy_insertion: insertion,
        deletion_drop: original - deletion,
        agreement_deletion: agree_del,
        agreement_insertion: agree_ins,
        mean_coverage: coverage,
        n_images: per_image.len(),
    })
}

pub fn aggregate(results: &[FaithfulnessResult]) -> Result<AggregateReport> {
    if results.is_empty() {
        return Err(FaithfulnessError::EmptyResults);
    }
    let pick = |c| results.iter().filter(|r| r.condition == c).collect::<Vec<_>>();
    Ok(AggregateReport {
        guided: condition_report(&pick(Condition::Guided)),
        random: condition_report(&pick(Condition::Random)),
        excluded: BTreeMap::new(),
    })
}

//! Candidate segments from pluggable backends, plus the per-mask geometry
//! (area, snapped centroid) that scoring relies on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use imageproc::region_labelling::{connected_components, Connectivity};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::external::{self, ExternalProcess, ExternalSpec};
use crate::grid::{BitGrid, Pixel};
use crate::ingest::{ImageTensor, Normalization};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("segmentation backend failure: {0}")]
    BackendFailure(String),
    #[error("backend `{0}` does not accept concept prompts")]
    ConceptsUnsupported(String),
    #[error("segment mask is empty")]
    EmptyMask,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SegmentationError>;

/// One nonempty candidate region at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    segment_id: u32,
    mask: BitGrid,
    area: usize,
    source: String,
    concept_hint: Option<String>,
}

impl SegmentMask {
    pub fn new(segment_id: u32, mask: BitGrid, source: &str, concept_hint: Option<String>) -> Result<Self> {
        let area = mask.count_ones();
        if area == 0 {
            return Err(SegmentationError::EmptyMask);
        }
        Ok(Self {
            segment_id,
            mask,
            area,
            source: source.to_string(),
            concept_hint,
        })
    }

    pub fn segment_id(&self) -> u32 {
        self.segment_id
    }

    pub fn mask(&self) -> &BitGrid {
        &self.mask
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn concept_hint(&self) -> Option<&str> {
        self.concept_hint.as_deref()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub image_id: String,
    pub segments: Vec<SegmentMask>,
}

impl SegmentSet {
    /// Fraction of pixels covered by at least one segment.
    pub fn coverage(&self) -> f64 {
        let Some(first) = self.segments.first() else {
            return 0.0;
        };
        let (h, w) = first.dims();
        let mut union = BitGrid::new(h, w);
        for s in &self.segments {
            for p in s.mask.ones() {
                union.set(p.row, p.col, true);
            }
        }
        union.count_ones() as f64 / (h * w) as f64
    }
}

pub fn mask_area(mask: &SegmentMask) -> usize {
    mask.area
}

/// Rounds `sum / count` to the nearest integer, halves toward zero
/// (non-negative inputs only).
fn round_half_down(sum: usize, count: usize) -> usize {
    // ceil((2 sum - count) / (2 count))
    let num = 2 * sum as i64 - count as i64;
    let den = 2 * count as i64;
    (num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0)) as usize
}

/// Mean member coordinate, rounded with halves toward the top-left. When
/// that pixel is not a member, the nearest member pixel (squared Euclidean
/// distance to the rounded point, ties in row-major order) is returned.
pub fn centroid_of(grid: &BitGrid) -> Option<Pixel> {
    let (mut rs, mut cs, mut n) = (0usize, 0usize, 0usize);
    for p in grid.ones() {
        rs += p.row;
        cs += p.col;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let c = Pixel::new(round_half_down(rs, n), round_half_down(cs, n));
    if grid.get(c.row, c.col) {
        return Some(c);
    }
    let dist = |p: &Pixel| {
        let dr = p.row as i64 - c.row as i64;
        let dc = p.col as i64 - c.col as i64;
        dr * dr + dc * dc
    };
    let mut best: Option<(i64, Pixel)> = None;
    for p in grid.ones() {
        let d = dist(&p);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, p));
        }
    }
    best.map(|(_, p)| p)
}

pub fn mask_centroid(mask: &SegmentMask) -> Result<Pixel> {
    centroid_of(&mask.mask).ok_or(SegmentationError::EmptyMask)
}

/// A mask proposed by a backend, before ids are assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub mask: BitGrid,
    pub concept: Option<String>,
}

pub trait SegmentationBackend: Send + Sync {
    fn name(&self) -> &str;

    fn accepts_concepts(&self) -> bool {
        false
    }

    fn concurrent(&self) -> bool {
        true
    }

    fn propose(&self, image: &ImageTensor, concepts: Option<&[String]>) -> Result<Vec<Proposal>>;
}

/// Runs `backend` and assigns sequential segment ids. Proposals smaller
/// than `min_area` pixels are dropped.
pub fn segment_image(
    image_id: &str,
    image: &ImageTensor,
    backend: &dyn SegmentationBackend,
    concepts: Option<&[String]>,
    min_area: usize,
) -> Result<SegmentSet> {
    if concepts.is_some() && !backend.accepts_concepts() {
        return Err(SegmentationError::ConceptsUnsupported(backend.name().to_string()));
    }
    let proposals = backend.propose(image, concepts)?;
    let mut segments = Vec::with_capacity(proposals.len());
    for p in proposals {
        if p.mask.dims() != (image.height, image.width) {
            return Err(SegmentationError::BackendFailure(format!(
                "`{}` returned a {:?} mask for a {}x{} image",
                backend.name(),
                p.mask.dims(),
                image.height,
                image.width
            )));
        }
        let area = p.mask.count_ones();
        if area == 0 || area < min_area {
            continue;
        }
        let id = segments.len() as u32;
        segments.push(SegmentMask::new(id, p.mask, backend.name(), p.concept)?);
    }
    Ok(SegmentSet {
        image_id: image_id.to_string(),
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallbackConfig {
    /// Quantization levels per color channel.
    pub levels: u8,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self { levels: 4 }
    }
}

/// Deterministic segmenter: quantize colors, label 4-connected components,
/// then merge components below `min_area` into their most-bordering
/// neighbor. The result partitions the image.
pub struct FallbackSegmenter {
    pub levels: u8,
    pub min_area: usize,
}

impl FallbackSegmenter {
    fn quantize(&self, image: &ImageTensor) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let l = self.levels.max(1) as u16;
        let q = |v: f32| ((v.clamp(0.0, 1.0) * l as f32) as u16).min(l - 1);
        ImageBuffer::from_fn(image.width as u32, image.height as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            let code = (q(image.get(0, r, c)) * l + q(image.get(1, r, c))) * l + q(image.get(2, r, c));
            Luma([code + 1])
        })
    }
}

impl SegmentationBackend for FallbackSegmenter {
    fn name(&self) -> &str {
        "fallback"
    }

    fn propose(&self, image: &ImageTensor, _concepts: Option<&[String]>) -> Result<Vec<Proposal>> {
        if image.normalization != Normalization::Raw01 {
            return Err(SegmentationError::BackendFailure(
                "fallback segmenter expects raw [0,1] pixels".into(),
            ));
        }
        let (h, w) = (image.height, image.width);
        let labelled = connected_components(&self.quantize(image), Connectivity::Four, Luma([0u16]));

        // relabel by first row-major appearance
        let mut remap: BTreeMap<u32, usize> = BTreeMap::new();
        let mut label = vec![0usize; h * w];
        let mut pixels: Vec<Vec<usize>> = Vec::new();
        for (i, px) in labelled.pixels().enumerate() {
            let next = remap.len();
            let id = *remap.entry(px.0[0]).or_insert(next);
            if id == pixels.len() {
                pixels.push(Vec::new());
            }
            pixels[id].push(i);
            label[i] = id;
        }

        let mut alive = vec![true; pixels.len()];
        let mut n_alive = pixels.len();
        for id in 0..pixels.len() {
            if n_alive <= 1 || pixels[id].len() >= self.min_area {
                continue;
            }
            let mut border: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &pixels[id] {
                let (r, c) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if label[j] != id {
                        *border.entry(label[j]).or_default() += 1;
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
            // most shared border, ties to the lowest id
            let Some((&target, _)) = border.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                continue;
            };
            let moved = std::mem::take(&mut pixels[id]);
            for &i in &moved {
                label[i] = target;
            }
            pixels[target].extend(moved);
            alive[id] = false;
            n_alive -= 1;
        }

        let mut order: Vec<usize> = (0..pixels.len()).filter(|&i| alive[i]).collect();
        order.sort_by_key(|&i| pixels[i].iter().min().copied());
        Ok(order
            .into_iter()
            .map(|id| {
                let mut mask = BitGrid::new(h, w);
                for &i in &pixels[id] {
                    mask.set_index(i, true);
                }
                Proposal { mask, concept: None }
            })
            .collect())
    }
}

/// Masks from an external process (`op = "segment"`).
pub struct ExternalSegmenter {
    name: String,
    accepts_concepts: bool,
    process: ExternalProcess,
}

impl ExternalSegmenter {
    pub fn spawn(name: &str, spec: &ExternalSpec) -> Result<Self> {
        let process =
            ExternalProcess::spawn(name, spec).map_err(|e| SegmentationError::BackendFailure(e.to_string()))?;
        Ok(Self {
            name: name.to_string(),
            accepts_concepts: spec.accepts_concepts,
            process,
        })
    }
}

impl SegmentationBackend for ExternalSegmenter {
    fn name(&self) -> &str {
        &self.name
    }

    fn accepts_concepts(&self) -> bool {
        self.accepts_concepts
    }

    fn concurrent(&self) -> bool {
        false
    }

    fn propose(&self, image: &ImageTensor, concepts: Option<&[String]>) -> Result<Vec<Proposal>> {
        let fail = |m: String| SegmentationError::BackendFailure(m);
        let mut req = json!({"op": "segment", "image": external::image_payload(image)});
        if let Some(c) = concepts {
            req["concepts"] = json!(c);
        }
        let reply = self.process.call(&req).map_err(|e| fail(e.to_string()))?;
        let masks = reply
            .get("masks")
            .and_then(|m| m.as_array())
            .ok_or_else(|| fail(format!("`{}`: response lacks `masks`", self.name)))?;
        masks
            .iter()
            .map(|m| {
                let counts: Vec<u32> = m
                    .get("counts")
                    .and_then(|c| serde_json::from_value(c.clone()).ok())
                    .ok_or_else(|| fail(format!("`{}`: mask lacks `counts`", self.name)))?;
                let mask = BitGrid::from_rle(image.height, image.width, &counts)
                    .ok_or_else(|| fail(format!("`{}`: RLE does not cover the image", self.name)))?;
                let concept = m.get("concept").and_then(|c| c.as_str()).map(str::to_string);
                Ok(Proposal { mask, concept })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub backends: Vec<String>,
    pub min_segment_area: usize,
    pub fallback: FallbackConfig,
    /// Text file of concept phrases, one per line, for concept-capable backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, ExternalSpec>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            backends: vec!["fallback".to_string()],
            min_segment_area: 4,
            fallback: FallbackConfig::default(),
            concepts_file: None,
            external: BTreeMap::new(),
        }
    }
}

/// Resolves a backend name. `[segmentation.external.NAME]` entries win over
/// the built-in `fallback`.
pub fn build_backend(name: &str, config: &SegmentationConfig, base: &Path) -> Result<Box<dyn SegmentationBackend>> {
    if let Some(spec) = config.external.get(name) {
        let spec = ExternalSpec {
            program: base.join(&spec.program),
            weights: spec.weights.as_ref().map(|w| base.join(w)),
            ..spec.clone()
        };
        return Ok(Box::new(ExternalSegmenter::spawn(name, &spec)?));
    }
    match name {
        "fallback" => Ok(Box::new(FallbackSegmenter {
            levels: config.fallback.levels,
            min_area: config.min_segment_area,
        })),
        other => Err(SegmentationError::BackendFailure(format!(
            "no segmentation backend `{other}`; configure [segmentation.external.{other}]"
        ))),
    }
}

/// One phrase per line; blank lines and `#` comments are skipped.
pub fn load_concepts(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSegment {
    segment_id: u32,
    area: usize,
    source: String,
    concept_hint: Option<String>,
    counts: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSet {
    image_id: String,
    height: usize,
    width: usize,
    segments: Vec<StoredSegment>,
}

/// Writes the set as run-length-encoded masks with per-mask metadata.
pub fn save_segment_set(set: &SegmentSet, height: usize, width: usize, path: &Path) -> Result<()> {
    let stored = StoredSet {
        image_id: set.image_id.clone(),
        height,
        width,
        segments: set
            .segments
            .iter()
            .map(|s| StoredSegment {
                segment_id: s.segment_id,
                area: s.area,
                source: s.source.clone(),
                concept_hint: s.concept_hint.clone(),
                counts: s.mask.to_rle(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&stored).expect("segments serialize"))?;
    Ok(())
}

pub fn load_segment_set(path: &Path) -> Result<SegmentSet> {
    let stored: StoredSet = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| SegmentationError::BackendFailure(format!("{}: {e}", path.display())))?;
    let segments = stored
        .segments
        .into_iter()
        .map(|s| {
            let mask = BitGrid::from_rle(stored.height, stored.width, &s.counts)
                .ok_or_else(|| SegmentationError::BackendFailure("stored RLE has wrong length".into()))?;
            SegmentMask::new(s.segment_id, mask, &s.source, s.concept_hint)
        })
        .collect::<Result<_>>()?;
    Ok(SegmentSet {
        image_id: stored.image_id,
        segments,
    })
}

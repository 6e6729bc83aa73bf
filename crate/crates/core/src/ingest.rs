//! Dataset manifests, image decoding and the classifier input preprocessing.
//!
//! Every image that reaches a classifier, attribution backend or segmenter
//! passes through [`preprocess`], so all downstream code sees square RGB
//! tensors of the configured side.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ColorType, DynamicImage, ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: invalid field `{field}`: {message}")]
    SchemaError {
        line: usize,
        field: String,
        message: String,
    },
    #[error("record `{id}` has label {label} but the manifest declares {num_classes} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        num_classes: usize,
    },
    #[error("could not decode image {0}")]
    DecodeError(String),
    #[error("expected a 3-channel RGB image, got {0:?}")]
    NonRGBInput(ColorType),
    #[error("augmentation requested for an eval record")]
    AugmentOnEval,
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    pub label: usize,
    /// Filled from the manifest header on load; not stored per line.
    #[serde(skip)]
    pub label_name: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    num_classes: usize,
    class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Per-class record counts for one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in self.split(split) {
            counts[r.label] += 1;
        }
        counts
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> IngestError {
    IngestError::SchemaError {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn required<'a>(
    obj: &'a serde_json::Map<String, serde_json::Value>,
    line: usize,
    field: &str,
) -> Result<&'a serde_json::Value> {
    obj.get(field).ok_or_else(|| schema(line, field, "missing"))
}

/// Reads and validates a line-delimited manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: ManifestHeader = loop {
        match lines.next() {
            None => return Err(schema(1, "num_classes", "empty manifest, header line required")),
            Some((i, line)) => {
                let line = line.map_err(|source| IngestError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| schema(i + 1, "header", e.to_string()))?;
                let obj = value
                    .as_object()
                    .ok_or_else(|| schema(i + 1, "header", "not an object"))?;
                let n = required(obj, i + 1, "num_classes")?
                    .as_u64()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| schema(i + 1, "num_classes", "must be a positive integer"))?
                    as usize;
                let names = required(obj, i + 1, "class_names")?
                    .as_array()
                    .ok_or_else(|| schema(i + 1, "class_names", "must be a list"))?
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| schema(i + 1, "class_names", "entries must be strings"))?;
                if names.len() != n {
                    return Err(schema(
                        i + 1,
                        "class_names",
                        format!("expected {n} entries, found {}", names.len()),
                    ));
                }
                break ManifestHeader {
                    num_classes: n,
                    class_names: names,
                };
            }
        }
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| schema(lineno, "record", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema(lineno, "record", "not an object"))?;
        let id = required(obj, lineno, "id")?
            .as_str()
            .ok_or_else(|| schema(lineno, "id", "must be a string"))?
            .to_string();
        let uri = required(obj, lineno, "uri")?
            .as_str()
            .ok_or_else(|| schema(lineno, "uri", "must be a string"))?
            .to_string();
        let label = required(obj, lineno, "label")?
            .as_u64()
            .ok_or_else(|| schema(lineno, "label", "must be a non-negative integer"))? as usize;
        let split = match required(obj, lineno, "split")?.as_str() {
            Some("train") => Split::Train,
            Some("eval") => Split::Eval,
            _ => return Err(schema(lineno, "split", "must be \"train\" or \"eval\"")),
        };
        if label >= header.num_classes {
            return Err(IngestError::LabelOutOfRange {
                id,
                label,
                num_classes: header.num_classes,
            });
        }
        if !seen.insert(id.clone()) {
            return Err(schema(lineno, "id", format!("duplicate id `{id}`")));
        }
        records.push(ImageRecord {
            label_name: header.class_names[label].clone(),
            id,
            uri,
            label,
            split,
        });
    }

    let manifest = DatasetManifest {
        num_classes: header.num_classes,
        class_names: header.class_names,
        records,
    };
    for split in [Split::Train, Split::Eval] {
        tracing::debug!(?split, counts = ?manifest.class_counts(split), "manifest class counts");
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let io = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    let header = ManifestHeader {
        num_classes: manifest.num_classes,
        class_names: manifest.class_names.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for r in &manifest.records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Resolves a record uri against the directory holding the manifest.
pub fn resolve_uri(manifest_path: &Path, uri: &str) -> PathBuf {
    let p = Path::new(uri);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    if path.to_string_lossy().contains("://") {
        return Err(IngestError::DecodeError(format!(
            "{}: remote uris are not fetched",
            path.display()
        )));
    }
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| IngestError::DecodeError(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw01,
    Standardized,
}

/// Square three-channel image in planar (channel, row, col) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub normalization: Normalization,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, normalization: Normalization, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), Self::CHANNELS * height * width);
        Self {
            height,
            width,
            normalization,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self::new(height, width, Normalization::Raw01, data)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[channel * self.plane() + row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f32) {
        let p = self.plane();
        self.data[channel * p + row * self.width + col] = v;
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let p = self.plane();
        &self.data[channel * p..(channel + 1) * p]
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f32; 3] {
        let mut out = [0.0; 3];
        for (c, m) in out.iter_mut().enumerate() {
            let sum: f64 = self.channel(c).iter().map(|&v| v as f64).sum();
            *m = (sum / self.plane().max(1) as f64) as f32;
        }
        out
    }

    pub fn from_rgb32f(img: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + i] = px.0[c];
            }
        }
        Self::new(h, w, Normalization::Raw01, data)
    }

    /// Converts a raw `[0,1]` tensor to an 8-bit image.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub side: usize,
    pub normalization: Normalization,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            side: 224,
            normalization: Normalization::Standardized,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Bilinear resize to `config.side` followed by the configured normalization.
pub fn preprocess(image: &DynamicImage, config: &PreprocessConfig) -> Result<ImageTensor> {
    match image.color() {
        ColorType::Rgb8 | ColorType::Rgb16 | ColorType::Rgb32F => {}
        other => return Err(IngestError::NonRGBInput(other)),
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(IngestError::DecodeError("image has no pixels".into()));
    }
    let rgb = image.to_rgb32f();
    let side = config.side as u32;
    let resized = if rgb.dimensions() == (side, side) {
        rgb
    } else {
        imageops::resize(&rgb, side, side, FilterType::Triangle)
    };
    let raw = ImageTensor::from_rgb32f(&resized);
    Ok(match config.normalization {
        Normalization::Raw01 => raw,
        Normalization::Standardized => standardize(&raw, config),
    })
}

/// `(v - mean_c) / std_c` per channel. Input must be raw `[0,1]`.
pub fn standardize(raw: &ImageTensor, config: &PreprocessConfig) -> ImageTensor {
    debug_assert_eq!(raw.normalization, Normalization::Raw01);
    let plane = raw.plane();
    let data = raw
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            (v - config.mean[c]) / config.std[c]
        })
        .collect();
    ImageTensor::new(raw.height, raw.width, Normalization::Standardized, data)
}

/// Tensor handed to the classifier for a raw image under `config`.
pub fn model_input(raw: &ImageTensor, config: &PreprocessConfig) -> ImageTensor {
    match config.normalization {
        Normalization::Raw01 => raw.clone(),
        Normalization::Standardized => standardize(raw, config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

fn jitter_factor(rng: &mut ChaCha8Rng, range: f32) -> f32 {
    let u: f32 = rng.random();
    1.0 + range * (2.0 * u - 1.0)
}

/// Random horizontal flip and color jitter for training images.
///
/// The random draws happen in a fixed order (flip, brightness, contrast,
/// saturation) so the output depends only on `seed` and `config`.
pub fn augment(tensor: &ImageTensor, split: Split, seed: u64, config: &AugmentConfig) -> Result<ImageTensor> {
    if split == Split::Eval {
        return Err(IngestError::AugmentOnEval);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random::<f64>() < config.flip_probability;
    let brightness = jitter_factor(&mut rng, config.brightness);
    let contrast = jitter_factor(&mut rng, config.contrast);
    let saturation = jitter_factor(&mut rng, config.saturation);

    let mut out = tensor.clone();
    let (h, w, plane) = (out.height, out.width, out.plane());
    if flip {
        for c in 0..3 {
            for r in 0..h {
                let row = &mut out.data[c * plane + r * w..c * plane + (r + 1) * w];
                row.reverse();
            }
        }
    }
    if brightness != 1.0 {
        out.data.iter_mut().for_each(|v| *v *= brightness);
    }
    if contrast != 1.0 {
        let mean = (0..plane).map(|i| luma(&out, i)).sum::<f32>() / plane as f32;
        out.data.iter_mut().for_each(|v| *v = mean + contrast * (*v - mean));
    }
    if saturation != 1.0 {
        for i in 0..plane {
            let gray = luma(&out, i);
            for c in 0..3 {
                let v = &mut out.data[c * plane + i];
                *v = gray + saturation * (*v - gray);
            }
        }
    }
    if out.normalization == Normalization::Raw01 {
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn luma(t: &ImageTensor, i: usize) -> f32 {
    let p = t.plane();
    0.299 * t.data[i] + 0.587 * t.data[p + i] + 0.114 * t.data[2 * p + i]
}

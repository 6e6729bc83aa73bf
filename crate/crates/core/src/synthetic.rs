//! A small planted-cue dataset: the class of each image is decided by one
//! saturated object placed on muted, structured clutter.
//!
//! Because the location of the deciding object is known exactly, the data
//! lets tests check that extracted crops land on it.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Luma, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_polygon_mut, Canvas};
use imageproc::point::Point;
use imageproc::rect::Rect;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::grid::BitGrid;
use crate::ingest::{self, DatasetManifest, ImageRecord, IngestError, Split};

pub const CLASS_NAMES: [&str; 3] = ["red-square", "green-disk", "blue-triangle"];

const CUE_COLORS: [[f32; 3]; 3] = [[0.88, 0.12, 0.10], [0.12, 0.78, 0.16], [0.12, 0.22, 0.90]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub side: u32,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub seed: u64,
    /// Amplitude of the uniform per-pixel noise.
    pub noise: f32,
    /// Muted decoy shapes per image.
    pub decoys: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            side: 48,
            train_per_class: 60,
            eval_per_class: 100,
            seed: 0,
            noise: 0.03,
            decoys: 3,
        }
    }
}

pub struct PlantedImage {
    pub image: RgbImage,
    pub label: usize,
    /// Pixels of the deciding object.
    pub cue: BitGrid,
}

#[derive(Clone, Copy)]
enum Shape {
    Square,
    Disk,
    Triangle,
}

fn to_rgb(c: [f32; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

fn muted(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let base: f32 = rng.random_range(0.25..0.75);
    [0, 1, 2].map(|_| base + rng.random_range(-0.06..0.06))
}

fn draw_shape<I>(img: &mut I, shape: Shape, top: i32, left: i32, size: i32, color: I::Pixel)
where
    I: Canvas,
{
    match shape {
        Shape::Square => draw_filled_rect_mut(img, Rect::at(left, top).of_size(size as u32, size as u32), color),
        Shape::Disk => {
            let r = size / 2;
            draw_filled_circle_mut(img, (left + r, top + r), r, color)
        }
        Shape::Triangle => draw_polygon_mut(
            img,
            &[
                Point::new(left + size / 2, top),
                Point::new(left + size - 1, top + size - 1),
                Point::new(left, top + size - 1),
            ],
            color,
        ),
    }
}

/// Draws one image of class `label`. Output depends only on the arguments.
pub fn planted_image(label: usize, seed: u64, config: &SyntheticConfig) -> PlantedImage {
    assert!(label < CLASS_NAMES.len(), "label {label} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = config.side as i32;

    // clutter: a muted backdrop with bands and blocks
    let mut img = RgbImage::from_pixel(config.side, config.side, to_rgb(muted(&mut rng)));
    for _ in 0..rng.random_range(2..5) {
        let h = rng.random_range(side / 8..side / 3);
        let top = rng.random_range(0..side - h);
        draw_filled_rect_mut(
            &mut img,
            Rect::at(0, top).of_size(config.side, h as u32),
            to_rgb(muted(&mut rng)),
        );
    }
    for _ in 0..rng.random_range(3..7) {
        let (w, h) = (rng.random_range(3..side / 3), rng.random_range(3..side / 3));
        let (top, left) = (rng.random_range(0..side - h), rng.random_range(0..side - w));
        draw_filled_rect_mut(
            &mut img,
            Rect::at(left, top).of_size(w as u32, h as u32),
            to_rgb(muted(&mut rng)),
        );
    }
    let shapes = [Shape::Square, Shape::Disk, Shape::Triangle];
    for _ in 0..config.decoys {
        let size = rng.random_range(side / 6..side / 4);
        let (top, left) = (rng.random_range(0..side - size), rng.random_range(0..side - size));
        let shape = shapes[rng.random_range(0..3)];
        draw_shape(&mut img, shape, top, left, size, to_rgb(muted(&mut rng)));
    }

    // the cue goes on last so nothing occludes it
    let size = rng.random_range(side / 5..side / 3);
    let (top, left) = (rng.random_range(0..side - size), rng.random_range(0..side - size));
    let mut cue_img = image::GrayImage::new(config.side, config.side);
    draw_shape(&mut cue_img, shapes[label], top, left, size, Luma([255u8]));
    let cue = BitGrid::from_fn(side as usize, side as usize, |r, c| {
        cue_img.get_pixel(c as u32, r as u32)[0] > 0
    });
    let color = to_rgb(CUE_COLORS[label]);
    for p in cue.ones() {
        img.put_pixel(p.col as u32, p.row as u32, color);
    }

    if config.noise > 0.0 {
        for px in img.pixels_mut() {
            for v in px.0.iter_mut() {
                let n: f32 = rng.random_range(-config.noise..=config.noise);
                *v = ((*v as f32 / 255.0 + n).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    PlantedImage { image: img, label, cue }
}

/// Ground truth written next to the manifest, one JSON object per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueRecord {
    pub id: String,
    pub label: usize,
    /// Inclusive bounds of the deciding object.
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

/// Writes PNGs, `manifest.jsonl` and `cues.jsonl` under `dir` and returns
/// the manifest path. Train and eval images use disjoint seeds.
pub fn write_dataset(dir: &Path, config: &SyntheticConfig) -> Result<PathBuf, IngestError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io(&images))?;
    let mut records = Vec::new();
    let mut cues = String::new();
    for (split, per_class) in [
        (Split::Train, config.train_per_class),
        (Split::Eval, config.eval_per_class),
    ] {
        let tag = match split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        for i in 0..per_class {
            for label in 0..CLASS_NAMES.len() {
                let index = (i * CLASS_NAMES.len() + label) as u64;
                let planted = planted_image(label, derive_seed(config.seed, tag, index), config);
                let id = format!("{tag}-{index:05}");
                let file = images.join(format!("{id}.png"));
                planted
                    .image
                    .save(&file)
                    .map_err(|e| IngestError::DecodeError(format!("{}: {e}", file.display())))?;
                let (row0, col0, row1, col1) = planted.cue.bounding_box().expect("cue is drawn");
                let cue = CueRecord {
                    id: id.clone(),
                    label,
                    row0,
                    col0,
                    row1,
                    col1,
                };
                cues.push_str(&serde_json::to_string(&cue).expect("cue serializes"));
                cues.push('\n');
                records.push(ImageRecord {
                    id,
                    uri: format!("images/{}", file.file_name().unwrap().to_string_lossy()),
                    label,
                    label_name: CLASS_NAMES[label].to_string(),
                    split,
                });
            }
        }
    }
    let cue_path = dir.join("cues.jsonl");
    fs::write(&cue_path, cues).map_err(io(&cue_path))?;
    let manifest = DatasetManifest {
        num_classes: CLASS_NAMES.len(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        records,
    };
    let path = dir.join("manifest.jsonl");
    ingest::write_manifest(&manifest, &path)?;
    Ok(path)
}

pub fn load_cues(path: &Path) -> Result<Vec<CueRecord>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::SchemaError {
                line: i + 1,
                field: "cue".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cue_is_saturated_and_visible() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..Default::default()
        };
        for label in 0..3 {
            let p = planted_image(label, 7, &cfg);
            assert!(p.cue.count_ones() >= 20);
            let want = to_rgb(CUE_COLORS[label]);
            assert!(p
                .cue
                .ones()
                .all(|q| *p.image.get_pixel(q.col as u32, q.row as u32) == want));
            // outside the cue, no pixel carries a saturated hue
            for (x, y, px) in p.image.enumerate_pixels() {
                if !p.cue.get(y as usize, x as usize) {
                    let (lo, hi) = (px.0.iter().min().unwrap(), px.0.iter().max().unwrap());
                    assert!(hi - lo < 60, "saturated clutter pixel {px:?}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(planted_image(1, 3, &cfg).image, planted_image(1, 3, &cfg).image);
        assert_ne!(planted_image(1, 3, &cfg).image, planted_image(1, 4, &cfg).image);
    }

    #[test]
    fn dataset_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            train_per_class: 2,
            eval_per_class: 3,
            side: 24,
            ..Default::default()
        };
        let path = write_dataset(dir.path(), &cfg).unwrap();
        let m = ingest::load_manifest(&path).unwrap();
        assert_eq!(m.class_counts(Split::Train), vec![2, 2, 2]);
        assert_eq!(m.class_counts(Split::Eval), vec![3, 3, 3]);
        let cues = load_cues(&dir.path().join("cues.jsonl")).unwrap();
        assert_eq!(cues.len(), 15);
        let first = &m.records[0];
        let img = ingest::load_image(&ingest::resolve_uri(&path, &first.uri)).unwrap();
        assert_eq!((img.width(), img.height()), (24, 24));
    }
}

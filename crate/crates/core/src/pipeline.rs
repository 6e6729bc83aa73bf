//! Stage orchestration: train, extract, evaluate and sweep.
//!
//! A run lives in `<root>/<hash>/` where `hash` identifies the effective
//! config. Attribution maps and segment sets go to `<root>/stages/`, keyed
//! by only the settings that affect them, so runs that differ in selection
//! or evaluation settings reuse them instead of calling backends again.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{
    self, compute_attribution, threshold_top_p, AttributionBackend, AttributionMap, SaliencyMask,
};
use crate::classifier::{self, predict_top1, BackendKind, ClassifierAdapter, TrainReport};
use crate::config::{config_hash, ConfigError, RunConfig};
use crate::faithfulness::{aggregate, evaluate_image, AggregateReport, EvalContext, FaithfulnessResult};
use crate::ingest::{
    self, DatasetManifest, ImageRecord, ImageTensor, IngestError, Normalization, PreprocessConfig, Split,
};
use crate::segmentation::{self, segment_image, SegmentSet, SegmentationBackend};
use crate::selection::{select_elements, SelectedElement};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] IngestError),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("missing results: {0}")]
    MissingResults(String),
    #[error("backend unusable: {0}")]
    BackendFatal(String),
    #[error("parameter grid has {points} points, cap is {cap}")]
    GridTooLarge { points: usize, cap: usize },
    #[error("training failed: {0}")]
    Train(#[from] classifier::TrainError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifacts(_) | PipelineError::MissingResults(_) => 2,
            PipelineError::BackendFatal(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("row serializes");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<Vec<T>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1)))
        .collect()
}

/// Makes an image id safe to use as a file name.
pub fn file_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub limit: Option<usize>,
    pub workers: Option<usize>,
    /// Replaces `run.output_dir` (set from `GEOXPLAIN_CACHE`).
    pub cache_root: Option<PathBuf>,
}

/// A config resolved to concrete locations.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
    pub hash: String,
    pub root: PathBuf,
    pub dir: PathBuf,
    pub workers: Option<usize>,
}

impl Run {
    pub fn open(config_path: &Path, overrides: &Overrides) -> Result<Self> {
        let config = RunConfig::load(config_path)?;
        let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Self::new(config, base, overrides))
    }

    pub fn new(mut config: RunConfig, base: PathBuf, overrides: &Overrides) -> Self {
        if let Some(seed) = overrides.seed {
            config.run.seed = seed;
        }
        if let Some(limit) = overrides.limit {
            config.run.limit = limit;
        }
        let root = match &overrides.cache_root {
            Some(r) => r.clone(),
            None => base.join(&config.run.output_dir),
        };
        let hash = config.hash();
        let dir = root.join(&hash[..16]);
        Self {
            config,
            base,
            hash,
            root,
            dir,
            workers: overrides.workers,
        }
    }

    /// Same base, root and workers, different config.
    pub fn with_config(&self, config: RunConfig) -> Self {
        let overrides = Overrides {
            seed: None,
            limit: None,
            workers: self.workers,
            cache_root: Some(self.root.clone()),
        };
        Self::new(config, self.base.clone(), &overrides)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.base.join(&self.config.run.manifest)
    }

    pub fn pair_dir(&self, method: &str, backend: &str) -> PathBuf {
        self.dir.join(pair_name(method, backend))
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for m in &self.config.attribution.methods {
            for b in &self.config.segmentation.backends {
                out.push((m.clone(), b.clone()));
            }
        }
        out
    }

    fn pool(&self) -> rayon::ThreadPool {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.workers {
            b = b.num_threads(n.max(1));
        }
        b.build().expect("thread pool")
    }

    fn eval_records(&self) -> Result<(DatasetManifest, Vec<ImageRecord>)> {
        let manifest = ingest::load_manifest(&self.manifest_path())?;
        let mut records: Vec<ImageRecord> = manifest.split(Split::Eval).cloned().collect();
        if self.config.run.limit > 0 {
            records.truncate(self.config.run.limit);
        }
        Ok((manifest, records))
    }

    fn raw_preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            normalization: Normalization::Raw01,
            ..self.config.ingest.preprocess.clone()
        }
    }

    fn load_raw(&self, record: &ImageRecord) -> std::result::Result<ImageTensor, IngestError> {
        let img = ingest::load_image(&ingest::resolve_uri(&self.manifest_path(), &record.uri))?;
        ingest::preprocess(&img, &self.raw_preprocess())
    }

    fn load_classifier(&self) -> Result<Box<dyn ClassifierAdapter>> {
        classifier::load_adapter(&self.config.classifier, self.config.ingest.preprocess.side, &self.base)
            .map_err(|e| PipelineError::BackendFatal(format!("classifier: {e}")))
    }

    /// Digest of the weights file, so retrained models never hit stale caches.
    fn weights_digest(&self) -> String {
        let c = &self.config.classifier;
        let path = match c.backend {
            BackendKind::ToyCnn => Some(self.base.join(&c.weights)),
            BackendKind::External => c
                .external
                .as_ref()
                .and_then(|e| e.weights.as_ref())
                .map(|w| self.base.join(w)),
            BackendKind::Stub => None,
        };
        path.and_then(|p| fs::read(p).ok())
            .map(|bytes| hex::encode(Sha256::digest(&bytes)))
            .unwrap_or_default()
    }

    fn maps_dir(&self, method: &str, weights_digest: &str) -> PathBuf {
        let mut attribution = self.config.attribution.clone();
        attribution.methods.clear();
        attribution.percentile_p = 0.0;
        let key = config_hash(&(
            self.manifest_path(),
            &self.config.ingest.preprocess,
            &self.config.classifier,
            weights_digest,
            &attribution,
            method,
        ));
        self.root
            .join("stages")
            .join(format!("maps-{}-{}", file_stem(method), &key[..16]))
    }

    fn segments_dir(&self, backend: &str, concepts: Option<&[String]>) -> PathBuf {
        let mut segmentation = self.config.segmentation.clone();
        segmentation.backends.clear();
        let key = config_hash(&(
            self.manifest_path(),
            self.config.ingest.preprocess.side,
            &segmentation,
            backend,
            concepts,
        ));
        self.root
            .join("stages")
            .join(format!("segments-{}-{}", file_stem(backend), &key[..16]))
    }

    fn manifest_file(&self) -> PathBuf {
        self.dir.join("run_manifest.json")
    }

    fn summary_file(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

pub fn pair_name(method: &str, backend: &str) -> String {
    format!("{}__{}", file_stem(method), file_stem(backend))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub started_at: u64,
    pub finished_at: u64,
    pub artifacts: Vec<PathBuf>,
    pub counts: BTreeMap<String, usize>,
}

const PREPROCESSING: &str = "bilinear resize to ingest.preprocess.side, no crop";

/// Bookkeeping for a run directory. Timestamps are Unix seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// How eval images reach the model.
    #[serde(default)]
    pub preprocessing: String,
    pub created_at: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Option<Self> {
        serde_json::from_slice(&fs::read(path).ok()?).ok()
    }

    /// Paths listed by any stage that do not exist.
    pub fn missing_artifacts(&self) -> Vec<PathBuf> {
        self.stages
            .values()
            .flat_map(|s| s.artifacts.iter())
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }
}

fn record_stage(run: &Run, stage: &str, record: StageRecord) -> Result<RunManifest> {
    let path = run.manifest_file();
    let mut manifest = RunManifest::load(&path).unwrap_or_else(|| RunManifest {
        config_hash: run.hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        preprocessing: PREPROCESSING.to_string(),
        created_at: record.started_at,
        stages: BTreeMap::new(),
    });
    manifest.stages.insert(stage.to_string(), record);
    write_file(
        &path,
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train

/// Trains the toy classifier on the train split and writes its weights to
/// `classifier.weights`, with the report next to them.
pub fn cmd_train(run: &Run) -> Result<TrainReport> {
    let manifest_path = run.manifest_path();
    let manifest = ingest::load_manifest(&manifest_path)?;
    let c = &run.config;
    let (model, report) = classifier::train_classifier(
        &manifest,
        &manifest_path,
        c.classifier.toy_cnn,
        &c.classifier.train,
        &c.ingest.preprocess,
        &c.ingest.augment,
    )?;
    let weights = run.base.join(&c.classifier.weights);
    if let Some(dir) = weights.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    model.save(&weights).map_err(io_err(&weights))?;
    let report_path = weights.with_extension("report.json");
    write_file(
        &report_path,
        &serde_json::to_vec_pretty(&report).expect("report serializes"),
    )?;
    tracing::info!(
        weights = %weights.display(),
        epochs = report.epochs.len(),
        best_epoch = report.best_epoch,
        val_accuracy = ?report.final_val_accuracy,
        "training finished"
    );
    Ok(report)
}

// -------------------------------------------------------------- extract

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    Ok,
    Failed,
}

/// One line of `crops.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub image_id: String,
    pub label: usize,
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub predicted_class: Option<usize>,
    pub n_segments: usize,
    /// Share of pixels in the attribution-guided region.
    pub saliency_coverage: f64,
    pub elements: Vec<SelectedElement>,
}

impl CropRecord {
    fn failed(record: &ImageRecord, predicted_class: Option<usize>, error: String) -> Self {
        Self {
            image_id: record.id.clone(),
            label: record.label,
            status: ImageStatus::Failed,
            error: Some(error),
            predicted_class,
            n_segments: 0,
            saliency_coverage: 0.0,
            elements: Vec::new(),
        }
    }
}

pub fn crops_file(pair_dir: &Path) -> PathBuf {
    pair_dir.join("crops.jsonl")
}

pub fn results_file(pair_dir: &Path) -> PathBuf {
    pair_dir.join("results.jsonl")
}

/// Backend name, backend, stage cache directory, concept prompts.
type SegmentStage = (String, Box<dyn SegmentationBackend>, PathBuf, Option<Vec<String>>);

struct Stages<'a> {
    model: &'a dyn ClassifierAdapter,
    methods: Vec<(String, Box<dyn AttributionBackend>, PathBuf)>,
    backends: Vec<SegmentStage>,
}

fn cached_map(
    model: &dyn ClassifierAdapter,
    backend: &dyn AttributionBackend,
    dir: &Path,
    image_id: &str,
    x: &ImageTensor,
    target: usize,
) -> std::result::Result<AttributionMap, String> {
    let stem = file_stem(image_id);
    if let Ok((map, side)) = attribution::load_map(dir, &stem) {
        if side.image_id == image_id && side.target_class == target && map.dims() == (x.height, x.width) {
            return Ok(map);
        }
    }
    let map = compute_attribution(model, x, target, backend).map_err(|e| e.to_string())?;
    attribution::save_map(&map, image_id, dir, &stem).map_err(|e| e.to_string())?;
    Ok(map)
}

fn cached_segments(
    backend: &dyn SegmentationBackend,
    dir: &Path,
    image_id: &str,
    raw: &ImageTensor,
    concepts: Option<&[String]>,
    min_area: usize,
) -> std::result::Result<SegmentSet, String> {
    let path = dir.join(format!("{}.json", file_stem(image_id)));
    if let Ok(set) = segmentation::load_segment_set(&path) {
        let dims_ok = set.segments.iter().all(|s| s.dims() == (raw.height, raw.width));
        if set.image_id == image_id && dims_ok {
            return Ok(set);
        }
    }
    let set = segment_image(image_id, raw, backend, concepts, min_area).map_err(|e| e.to_string())?;
    segmentation::save_segment_set(&set, raw.height, raw.width, &path).map_err(|e| e.to_string())?;
    Ok(set)
}

fn saliency_file(run: &Run, method: &str, image_id: &str) -> PathBuf {
    run.dir
        .join("saliency")
        .join(file_stem(method))
        .join(format!("{}.json", file_stem(image_id)))
}

#[derive(Serialize)]
struct StoredSaliency<'a> {
    image_id: &'a str,
    percentile_p: f64,
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

fn save_saliency(path: &Path, image_id: &str, s: &SaliencyMask) -> std::result::Result<(), String> {
    let (height, width) = s.dims();
    let stored = StoredSaliency {
        image_id,
        percentile_p: s.percentile_p,
        height,
        width,
        counts: s.mask.to_rle(),
    };
    write_file(path, &serde_json::to_vec(&stored).expect("saliency serializes")).map_err(|e| e.to_string())
}

fn export_crops(
    dir: &Path,
    image_id: &str,
    raw: &ImageTensor,
    elements: &[SelectedElement],
) -> std::result::Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let rgb = raw.to_rgb8();
    for e in elements {
        let c = e.crop;
        let view = image::imageops::crop_imm(&rgb, c.col0 as u32, c.row0 as u32, c.width() as u32, c.height() as u32);
        let path = dir.join(format!("{}_{}.png", file_stem(image_id), e.rank));
        view.to_image()
            .save(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

/// Results for every (method, backend) pair on one image, in `run.pairs()` order.
fn extract_image(run: &Run, stages: &Stages, record: &ImageRecord) -> Vec<CropRecord> {
    let n_pairs = stages.methods.len() * stages.backends.len();
    let start = Instant::now();
    let raw = match run.load_raw(record) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(image_id = %record.id, error = %e, "image skipped");
            return vec![CropRecord::failed(record, None, e.to_string()); n_pairs];
        }
    };
    let x = ingest::model_input(&raw, &run.config.ingest.preprocess);
    let target = match predict_top1(stages.model, &x) {
        Ok((c, _)) => c,
        Err(e) => return vec![CropRecord::failed(record, None, e.to_string()); n_pairs],
    };
    let p = run.config.attribution.percentile_p;
    let maps: Vec<std::result::Result<(AttributionMap, SaliencyMask), String>> = stages
        .methods
        .iter()
        .map(|(name, backend, dir)| {
            let map = cached_map(stages.model, backend.as_ref(), dir, &record.id, &x, target)?;
            let saliency = threshold_top_p(&map, p).map_err(|e| e.to_string())?;
            save_saliency(&saliency_file(run, name, &record.id), &record.id, &saliency)?;
            Ok((map, saliency))
        })
        .collect();
    let segments: Vec<std::result::Result<SegmentSet, String>> = stages
        .backends
        .iter()
        .map(|(_, backend, dir, concepts)| {
            cached_segments(
                backend.as_ref(),
                dir,
                &record.id,
                &raw,
                concepts.as_deref(),
                run.config.segmentation.min_segment_area,
            )
        })
        .collect();

    let mut out = Vec::with_capacity(n_pairs);
    for (m, map) in maps.iter().enumerate() {
        for (b, segs) in segments.iter().enumerate() {
            let (method, backend) = (&stages.methods[m].0, &stages.backends[b].0);
            let result = match (map, segs) {
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
                (Ok((map, saliency)), Ok(set)) => select_elements(map, saliency, &set.segments, &run.config.selection)
                    .map_err(|e| e.to_string())
                    .and_then(|elements| {
                        if run.config.run.export_crop_pngs {
                            export_crops(
                                &run.pair_dir(method, backend).join("crops"),
                                &record.id,
                                &raw,
                                &elements,
                            )?;
                        }
                        Ok(CropRecord {
                            image_id: record.id.clone(),
                            label: record.label,
                            status: ImageStatus::Ok,
                            error: None,
                            predicted_class: Some(target),
                            n_segments: set.segments.len(),
                            saliency_coverage: saliency.mask.count_ones() as f64 / saliency.mask.len() as f64,
                            elements,
                        })
                    }),
            };
            out.push(result.unwrap_or_else(|e| {
                tracing::warn!(image_id = %record.id, method, backend, error = %e, "image failed");
                CropRecord::failed(record, Some(target), e)
            }));
        }
    }
    tracing::info!(
        stage = "extract",
        image_id = %record.id,
        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
        "image done"
    );
    out
}

/// Attribution, segmentation and selection for every eval image and every
/// configured (method, backend) pair.
pub fn cmd_extract(run: &Run) -> Result<RunManifest> {
    let started_at = unix_now();
    let (_, records) = run.eval_records()?;
    let model = run.load_classifier()?;
    let digest = run.weights_digest();
    let cfg = &run.config;

    let concepts = match &cfg.segmentation.concepts_file {
        Some(p) => Some(
            segmentation::load_concepts(&run.base.join(p))
                .map_err(|e| ConfigError::Invalid(format!("concepts file: {e}")))?,
        ),
        None => None,
    };
    let methods = cfg
        .attribution
        .methods
        .iter()
        .map(|m| {
            let backend = attribution::build_backend(m, &cfg.attribution, &run.base)
                .map_err(|e| PipelineError::BackendFatal(e.to_string()))?;
            Ok((m.clone(), backend, run.maps_dir(m, &digest)))
        })
        .collect::<Result<Vec<_>>>()?;
    let backends = cfg
        .segmentation
        .backends
        .iter()
        .map(|b| {
            let backend = segmentation::build_backend(b, &cfg.segmentation, &run.base)
                .map_err(|e| PipelineError::BackendFatal(e.to_string()))?;
            let concepts = if backend.accepts_concepts() {
                concepts.clone()
            } else {
                None
            };
            if concepts.is_none() && cfg.segmentation.concepts_file.is_some() {
                tracing::warn!(backend = %b, "backend does not take concept prompts; running unprompted");
            }
            let dir = run.segments_dir(b, concepts.as_deref());
            Ok((b.clone(), backend, dir, concepts))
        })
        .collect::<Result<Vec<_>>>()?;
    let stages = Stages {
        model: model.as_ref(),
        methods,
        backends,
    };

    fs::create_dir_all(&run.dir).map_err(io_err(&run.dir))?;
    write_file(&run.dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let per_image: Vec<Vec<CropRecord>> = run
        .pool()
        .install(|| records.par_iter().map(|r| extract_image(run, &stages, r)).collect());

    let mut artifacts = vec![run.dir.join("config.toml")];
    let mut counts = BTreeMap::from([("images".to_string(), records.len())]);
    for (k, (method, backend)) in run.pairs().iter().enumerate() {
        let rows: Vec<CropRecord> = per_image.iter().map(|v| v[k].clone()).collect();
        let failed = rows.iter().filter(|r| r.status == ImageStatus::Failed).count();
        if !rows.is_empty() && failed == rows.len() {
            let first = rows[0].error.clone().unwrap_or_default();
            return Err(PipelineError::BackendFatal(format!(
                "{method} / {backend} failed on every image; first error: {first}"
            )));
        }
        let path = crops_file(&run.pair_dir(method, backend));
        write_jsonl(&path, &rows)?;
        artifacts.push(path);
        let name = pair_name(method, backend);
        counts.insert(format!("{name}/failed"), failed);
        counts.insert(format!("{name}/segments"), rows.iter().map(|r| r.n_segments).sum());
        counts.insert(format!("{name}/crops"), rows.iter().map(|r| r.elements.len()).sum());
    }
    for (_, _, dir) in &stages.methods {
        artifacts.push(dir.clone());
    }
    for (_, _, dir, _) in &stages.backends {
        artifacts.push(dir.clone());
    }
    for dir in &artifacts {
        if !dir.exists() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let manifest = record_stage(
        run,
        "extract",
        StageRecord {
            started_at,
            finished_at: unix_now(),
            artifacts,
            counts,
        },
    )?;
    tracing::info!(run_dir = %run.dir.display(), images = records.len(), "extract finished");
    Ok(manifest)
}

// ------------------------------------------------------------- evaluate

/// Aggregate for one (method, backend) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: String,
    pub backend: String,
    pub config_hash: String,
    /// Mean share of pixels in the attribution-guided region.
    pub saliency_coverage: f64,
    pub report: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub run_seed: u64,
    pub random_repeats: usize,
    pub fill: crate::faithfulness::FillMode,
    pub entries: Vec<SummaryEntry>,
}

impl Summary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("summary.json");
        let bytes = fs::read(&path).map_err(|_| PipelineError::MissingResults(path.display().to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::MissingResults(format!("{}: {e}", path.display())))
    }
}

enum ImageEval {
    Results(Vec<FaithfulnessResult>),
    Excluded(&'static str),
}

/// Folds per-image outcomes into an aggregate with exclusion counts.
pub fn summarize(results: &[FaithfulnessResult], excluded: BTreeMap<String, usize>) -> AggregateReport {
    let mut report = aggregate(results).unwrap_or(AggregateReport {
        guided: None,
        random: None,
        excluded: BTreeMap::new(),
    });
    report.excluded = excluded;
    report
}

/// Deletion and insertion tests for every pair extracted in this run.
pub fn cmd_evaluate(run: &Run) -> Result<Summary> {
    let started_at = unix_now();
    let pairs = run.pairs();
    let mut crop_sets = Vec::new();
    for (method, backend) in &pairs {
        let path = crops_file(&run.pair_dir(method, backend));
        if !path.exists() {
            return Err(PipelineError::MissingArtifacts(format!(
                "{} (run `extract` with the same config first)",
                path.display()
            )));
        }
        let rows: Vec<CropRecord> = read_jsonl(&path).map_err(PipelineError::MissingArtifacts)?;
        crop_sets.push(rows);
    }
    let (_, records) = run.eval_records()?;
    let by_id: BTreeMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let model = run.load_classifier()?;
    let ctx = EvalContext {
        model: model.as_ref(),
        preprocess: &run.config.ingest.preprocess,
        config: &run.config.faithfulness,
        run_seed: run.config.run.seed,
    };

    let mut entries = Vec::new();
    let mut artifacts = Vec::new();
    let mut counts = BTreeMap::new();
    let pool = run.pool();
    for ((method, backend), rows) in pairs.iter().zip(&crop_sets) {
        let outcomes: Vec<ImageEval> = pool.install(|| {
            rows.par_iter()
                .map(|row| {
                    if row.status == ImageStatus::Failed {
                        return ImageEval::Excluded("extract_failed");
                    }
                    if row.elements.is_empty() {
                        return ImageEval::Excluded("no_crops");
                    }
                    let Some(record) = by_id.get(row.image_id.as_str()) else {
                        return ImageEval::Excluded("not_in_manifest");
                    };
                    let start = Instant::now();
                    let boxes: Vec<_> = row.elements.iter().map(|e| e.crop).collect();
                    let out = run.load_raw(record).map_err(|e| e.to_string()).and_then(|raw| {
                        evaluate_image(&ctx, &row.image_id, row.label, &raw, &boxes).map_err(|e| e.to_string())
                    });
                    tracing::info!(
                        stage = "evaluate",
                        image_id = %row.image_id,
                        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
                        "image done"
                    );
                    match out {
                        Ok(r) => ImageEval::Results(r),
                        Err(e) => {
                            tracing::warn!(image_id = %row.image_id, error = %e, "evaluation failed");
                            ImageEval::Excluded("evaluate_failed")
                        }
                    }
                })
                .collect()
        });
        let mut results = Vec::new();
        let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
        for o in outcomes {
            match o {
                ImageEval::Results(r) => results.extend(r),
                ImageEval::Excluded(reason) => *excluded.entry(reason.to_string()).or_default() += 1,
            }
        }
        let path = results_file(&run.pair_dir(method, backend));
        write_jsonl(&path, &results)?;
        artifacts.push(path);
        let ok_rows: Vec<&CropRecord> = rows.iter().filter(|r| r.status == ImageStatus::Ok).collect();
        let saliency_coverage = if ok_rows.is_empty() {
            0.0
        } else {
            ok_rows.iter().map(|r| r.saliency_coverage).sum::<f64>() / ok_rows.len() as f64
        };
        counts.insert(format!("{}/results", pair_name(method, backend)), results.len());
        counts.insert(
            format!("{}/excluded", pair_name(method, backend)),
            excluded.values().sum(),
        );
        entries.push(SummaryEntry {
            method: method.clone(),
            backend: backend.clone(),
            config_hash: run.hash.clone(),
            saliency_coverage,
            report: summarize(&results, excluded),
        });
    }
    let summary = Summary {
        config_hash: run.hash.clone(),
        run_seed: run.config.run.seed,
        random_repeats: run.config.faithfulness.random_repeats,
        fill: run.config.faithfulness.fill,
        entries,
    };
    write_file(
        &run.summary_file(),
        &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    artifacts.push(run.summary_file());
    record_stage(
        run,
        "evaluate",
        StageRecord {
            started_at,
            finished_at: unix_now(),
            artifacts,
            counts,
        },
    )?;
    tracing::info!(run_dir = %run.dir.display(), "evaluate finished");
    Ok(summary)
}

// ---------------------------------------------------------------- sweep

/// Values to try per parameter. Parameters left empty keep the config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub p: Vec<f64>,
    #[serde(default)]
    pub s_min: Vec<f64>,
    #[serde(default, alias = "tau")]
    pub iou_threshold: Vec<f64>,
    #[serde(default, alias = "kappa")]
    pub containment_threshold: Vec<f64>,
    #[serde(default, alias = "rho")]
    pub area_ratio_gate: Vec<f64>,
    #[serde(default)]
    pub pad_fraction: Vec<f64>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| {
            ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
            .into()
        })
    }

    fn axes(&self) -> Vec<(&'static str, &[f64])> {
        [
            ("p", &self.p[..]),
            ("s_min", &self.s_min[..]),
            ("iou_threshold", &self.iou_threshold[..]),
            ("containment_threshold", &self.containment_threshold[..]),
            ("area_ratio_gate", &self.area_ratio_gate[..]),
            ("pad_fraction", &self.pad_fraction[..]),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect()
    }

    /// Number of grid points (1 for an empty grid).
    pub fn point_count(&self) -> usize {
        self.axes().iter().map(|(_, v)| v.len()).product()
    }

    /// Every combination, first axis varying slowest.
    pub fn points(&self) -> Vec<BTreeMap<String, f64>> {
        let mut points = vec![BTreeMap::new()];
        for (name, values) in self.axes() {
            points = points
                .into_iter()
                .flat_map(|pt| {
                    values.iter().map(move |&v| {
                        let mut pt = pt.clone();
                        pt.insert(name.to_string(), v);
                        pt
                    })
                })
                .collect();
        }
        points
    }
}

fn apply_point(config: &mut RunConfig, point: &BTreeMap<String, f64>) {
    for (k, &v) in point {
        match k.as_str() {
            "p" => config.attribution.percentile_p = v,
            "s_min" => config.selection.s_min = v,
            "iou_threshold" => config.selection.iou_threshold = v,
            "containment_threshold" => config.selection.containment_threshold = v,
            "area_ratio_gate" => config.selection.area_ratio_gate = v,
            "pad_fraction" => config.selection.pad_fraction = v,
            _ => unreachable!("grid axes are fixed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: BTreeMap<String, f64>,
    pub method: String,
    pub backend: String,
    pub config_hash: String,
    pub saliency_coverage: f64,
    pub crop_coverage: Option<f64>,
    pub deletion_drop: Option<f64>,
    pub insertion_accuracy: Option<f64>,
    pub random_deletion_drop: Option<f64>,
    pub random_insertion_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub base_config_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut s = String::from(
            "| params | method | backend | saliency coverage | crop coverage | deletion drop | insertion acc | random deletion drop | random insertion acc |\n|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str(&format!(
                "| {} | {} | {} | {:.4} | {} | {} | {} | {} | {} |\n",
                params.join(", "),
                r.method,
                r.backend,
                r.saliency_coverage,
                fmt(r.crop_coverage),
                fmt(r.deletion_drop),
                fmt(r.insertion_accuracy),
                fmt(r.random_deletion_drop),
                fmt(r.random_insertion_accuracy),
            ));
        }
        s
    }
}

/// Runs extract and evaluate once per grid point and tabulates the results.
/// Maps and segments come from the shared stage cache after the first point.
pub fn cmd_sweep(run: &Run, grid: &SweepGrid) -> Result<(SweepTable, PathBuf)> {
    let points = grid.points();
    let cap = run.config.run.max_grid_points;
    if points.len() > cap {
        return Err(PipelineError::GridTooLarge {
            points: points.len(),
            cap,
        });
    }
    let mut rows = Vec::new();
    for point in points {
        let mut config = run.config.clone();
        apply_point(&mut config, &point);
        config.validate()?;
        let sub = run.with_config(config);
        tracing::info!(?point, run_dir = %sub.dir.display(), "sweep point");
        cmd_extract(&sub)?;
        let summary = cmd_evaluate(&sub)?;
        for e in summary.entries {
            let g = e.report.guided.as_ref();
            let r = e.report.random.as_ref();
            rows.push(SweepRow {
                params: point.clone(),
                method: e.method,
                backend: e.backend,
                config_hash: e.config_hash,
                saliency_coverage: e.saliency_coverage,
                crop_coverage: g.map(|c| c.mean_coverage),
                deletion_drop: g.map(|c| c.deletion_drop),
                insertion_accuracy: g.map(|c| c.accuracy_insertion),
                random_deletion_drop: r.map(|c| c.deletion_drop),
                random_insertion_accuracy: r.map(|c| c.accuracy_insertion),
            });
        }
    }
    let table = SweepTable {
        base_config_hash: run.hash.clone(),
        rows,
    };
    let dir = run.root.join("sweeps").join(&config_hash(&(&run.hash, grid))[..16]);
    write_file(
        &dir.join("sweep.json"),
        &serde_json::to_vec_pretty(&table).expect("table serializes"),
    )?;
    write_file(&dir.join("sweep.md"), table.to_markdown().as_bytes())?;
    Ok((table, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_enumerate_the_product() {
        let g = SweepGrid {
            p: vec![10.0, 20.0, 40.0],
            s_min: vec![0.1, 0.2],
            ..Default::default()
        };
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(g.point_count(), 6);
        assert_eq!(pts[0]["p"], 10.0);
        assert_eq!(pts[1]["s_min"], 0.2);
        assert_eq!(SweepGrid::default().points(), vec![BTreeMap::new()]);
    }

    #[test]
    fn grid_aliases_parse() {
        let g: SweepGrid = toml::from_str("tau = [0.5]\nkappa = [0.9]\nrho = [2.0]").unwrap();
        assert_eq!(
            (g.iou_threshold[0], g.containment_threshold[0], g.area_ratio_gate[0]),
            (0.5, 0.9, 2.0)
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::MissingArtifacts("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::BackendFatal("x".into()).exit_code(), 3);
        assert_eq!(PipelineError::Config(ConfigError::Invalid("x".into())).exit_code(), 1);
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("a/b c.png"), "a_b_c.png");
    }
}

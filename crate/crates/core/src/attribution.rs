//! Attribution maps, their normalization, and top-p saliency thresholding.
//!
//! A backend produces a raw relevance grid for `(image, target class)`.
//! [`compute_attribution`] checks the classifier exposes what the backend
//! needs, upsamples the grid to input resolution and min-max normalizes it.
//! [`threshold_top_p`] then keeps exactly `ceil(p/100 * H * W)` pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use npyz::WriterBuilder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::classifier::{ClassifierAdapter, ClassifierError};
use crate::external::{self, ExternalProcess, ExternalSpec};
use crate::grid::BitGrid;
use crate::ingest::ImageTensor;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("attribution backend `{backend}` needs classifier capability `{capability}`")]
    CapabilityMissing { backend: String, capability: &'static str },
    #[error("attribution backend failure: {0}")]
    BackendFailure(String),
    #[error("attribution map contains non-finite values")]
    NonFiniteValues,
    #[error("percentile must lie in (0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ClassifierError> for AttributionError {
    fn from(e: ClassifierError) -> Self {
        AttributionError::BackendFailure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AttributionError>;

/// Per-pixel relevance for one `(image, class)` pair, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub target_class: usize,
    pub method: String,
}

impl AttributionMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, target_class: usize, method: &str) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
            target_class,
            method: method.to_string(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Min-max rescale to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize_map(map: AttributionMap) -> Result<AttributionMap> {
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(AttributionError::NonFiniteValues);
    }
    let min = map.values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    let values = if map.values.is_empty() || range <= 0.0 {
        vec![0.0; map.values.len()]
    } else {
        map.values.iter().map(|&v| (v - min) / range).collect()
    };
    Ok(AttributionMap { values, ..map })
}

/// Attribution-guided region: the top-p percent of pixels of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMask {
    pub percentile_p: f64,
    pub mask: BitGrid,
}

impl SaliencyMask {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// Number of pixels `threshold_top_p` keeps out of `n`.
pub fn top_p_count(p: f64, n: usize) -> usize {
    // p * n first keeps integer percentages exact
    ((p * n as f64) / 100.0).ceil() as usize
}

/// Keeps the `ceil(p/100 * H*W)` highest-valued pixels. Ties at the cutoff
/// go to the lower row-major index.
pub fn threshold_top_p(map: &AttributionMap, p: f64) -> Result<SaliencyMask> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(AttributionError::InvalidPercentile(p));
    }
    let n = map.values.len();
    let k = top_p_count(p, n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep ascending index order
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]));
    let mut mask = BitGrid::new(map.height, map.width);
    for &i in &order[..k] {
        mask.set_index(i, true);
    }
    Ok(SaliencyMask { percentile_p: p, mask })
}

/// A raw grid from a backend, at whatever resolution the backend works in.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

pub trait AttributionBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Classifier capability this backend relies on.
    fn requires(&self) -> Option<&'static str> {
        None
    }

    fn raw_map(&self, model: &dyn ClassifierAdapter, x: &ImageTensor, target: usize) -> Result<RawMap>;
}

/// Runs `backend`, upsamples to the input resolution and normalizes.
pub fn compute_attribution(
    model: &dyn ClassifierAdapter,
    x: &ImageTensor,
    target: usize,
    backend: &dyn AttributionBackend,
) -> Result<AttributionMap> {
    if let Some(cap) = backend.requires() {
        let caps = model.capabilities();
        let present = match cap {
            "activation_maps" => caps.activation_maps,
            "input_gradients" => caps.input_gradients,
            _ => caps.probabilities,
        };
        if !present {
            return Err(AttributionError::CapabilityMissing {
                backend: backend.name().to_string(),
                capability: cap,
            });
        }
    }
    let raw = backend.raw_map(model, x, target)?;
    if raw.values.len() != raw.height * raw.width || raw.values.is_empty() {
        return Err(AttributionError::BackendFailure(format!(
            "`{}` returned a malformed grid",
            backend.name()
        )));
    }
    let map = AttributionMap::new(raw.height, raw.width, raw.values, target, backend.name());
    let map = normalize_map(map)?;
    let map = if map.dims() == (x.height, x.width) {
        map
    } else {
        upsample_bilinear(&map, x.height, x.width)
    };
    normalize_map(map)
}

/// Bilinear resize of a normalized map.
pub fn upsample_bilinear(map: &AttributionMap, height: usize, width: usize) -> AttributionMap {
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(map.width as u32, map.height as u32, map.values.clone()).expect("sized buffer");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    AttributionMap {
        height,
        width,
        values: out.into_raw(),
        target_class: map.target_class,
        method: map.method.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubKind {
    Gaussian,
    Constant,
}

/// Fixed map, independent of the model: a Gaussian bump or a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubConfig {
    pub kind: StubKind,
    /// Bump center as fractions of height and width.
    pub center: [f64; 2],
    /// Standard deviation as a fraction of the side.
    pub sigma: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            kind: StubKind::Gaussian,
            center: [0.5, 0.5],
            sigma: 0.1,
        }
    }
}

pub struct StubAttribution(pub StubConfig);

impl AttributionBackend for StubAttribution {
    fn name(&self) -> &str {
        "stub"
    }

    fn raw_map(&self, _model: &dyn ClassifierAdapter, x: &ImageTensor, _target: usize) -> Result<RawMap> {
        let (h, w) = (x.height, x.width);
        let values = match self.0.kind {
            StubKind::Constant => vec![1.0; h * w],
            StubKind::Gaussian => {
                let cr = self.0.center[0] * (h as f64 - 1.0);
                let cc = self.0.center[1] * (w as f64 - 1.0);
                let s = self.0.sigma * h.max(w) as f64;
                (0..h * w)
                    .map(|i| {
                        let (r, c) = ((i / w) as f64, (i % w) as f64);
                        (-((r - cr).powi(2) + (c - cc).powi(2)) / (2.0 * s * s)).exp() as f32
                    })
                    .collect()
            }
        };
        Ok(RawMap {
            height: h,
            width: w,
            values,
        })
    }
}

/// Gradient-weighted activation map: channel weights are the spatial mean
/// of the target-logit gradient; the map is the ReLU of the weighted sum.
pub struct RefCam;

impl AttributionBackend for RefCam {
    fn name(&self) -> &str {
        "refcam"
    }

    fn requires(&self) -> Option<&'static str> {
        Some("activation_maps")
    }

    fn raw_map(&self, model: &dyn ClassifierAdapter, x: &ImageTensor, target: usize) -> Result<RawMap> {
        let ag = model.activation_gradients(x, target)?;
        let plane = ag.height * ag.width;
        let mut cam = vec![0.0f32; plane];
        for k in 0..ag.channels {
            let g = &ag.gradients[k * plane..(k + 1) * plane];
            let alpha = g.iter().sum::<f32>() / plane as f32;
            let a = &ag.activations[k * plane..(k + 1) * plane];
            cam.iter_mut().zip(a).for_each(|(c, &v)| *c += alpha * v);
        }
        cam.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(RawMap {
            height: ag.height,
            width: ag.width,
            values: cam,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothGradConfig {
    /// Noise std as a fraction of the input's value range.
    pub noise_level: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            noise_level: 0.15,
            samples: 25,
            seed: 0,
        }
    }
}

fn abs_channel_max(grad: &[f32], plane: usize) -> Vec<f32> {
    (0..plane)
        .map(|i| (0..3).map(|c| grad[c * plane + i].abs()).fold(0.0, f32::max))
        .collect()
}

/// Plain input-gradient saliency: max over channels of `|d logit / d x|`.
pub fn gradient_saliency(model: &dyn ClassifierAdapter, x: &ImageTensor, target: usize) -> Result<RawMap> {
    let g = model.input_gradients(x, target)?;
    Ok(RawMap {
        height: x.height,
        width: x.width,
        values: abs_channel_max(&g, x.plane()),
    })
}

/// Gradient saliency averaged over Gaussian-perturbed copies of the input.
pub struct SmoothGrad(pub SmoothGradConfig);

impl AttributionBackend for SmoothGrad {
    fn name(&self) -> &str {
        "smoothgrad"
    }

    fn requires(&self) -> Option<&'static str> {
        Some("input_gradients")
    }

    fn raw_map(&self, model: &dyn ClassifierAdapter, x: &ImageTensor, target: usize) -> Result<RawMap> {
        let samples = self.0.samples.max(1);
        let min = x.data.iter().copied().fold(f32::INFINITY, f32::min);
        let max = x.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sigma = self.0.noise_level * (max - min) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.0.seed);
        let mut acc = vec![0.0f32; x.plane()];
        for _ in 0..samples {
            let noisy = if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).map_err(|e| AttributionError::BackendFailure(e.to_string()))?;
                let mut n = x.clone();
                n.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
                n
            } else {
                x.clone()
            };
            let s = gradient_saliency(model, &noisy, target)?;
            acc.iter_mut().zip(&s.values).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|v| *v /= samples as f32);
        Ok(RawMap {
            height: x.height,
            width: x.width,
            values: acc,
        })
    }
}

/// Attribution computed by an external process (`op = "attribute"`).
pub struct ExternalAttribution {
    name: String,
    process: ExternalProcess,
}

impl ExternalAttribution {
    pub fn spawn(name: &str, spec: &ExternalSpec) -> Result<Self> {
        let process =
            ExternalProcess::spawn(name, spec).map_err(|e| AttributionError::BackendFailure(e.to_string()))?;
        Ok(Self {
            name: name.to_string(),
            process,
        })
    }
}

impl AttributionBackend for ExternalAttribution {
    fn name(&self) -> &str {
        &self.name
    }

    fn raw_map(&self, _model: &dyn ClassifierAdapter, x: &ImageTensor, target: usize) -> Result<RawMap> {
        let fail = |e: crate::external::ExternalError| AttributionError::BackendFailure(e.to_string());
        let reply = self
            .process
            .call(&json!({"op": "attribute", "image": external::image_payload(x), "target": target}))
            .map_err(fail)?;
        let dim = |k: &str| reply.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let (Some(height), Some(width), Some(values)) =
            (dim("height"), dim("width"), external::f64_list(&reply, "values"))
        else {
            return Err(fail(self.process.protocol("attribute: expected height, width, values")));
        };
        Ok(RawMap {
            height,
            width,
            values: values.into_iter().map(|v| v as f32).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Backends to run; each is compared separately.
    pub methods: Vec<String>,
    /// Top-p percentile kept as the attribution-guided region.
    pub percentile_p: f64,
    pub smoothgrad: SmoothGradConfig,
    pub stub: StubConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, ExternalSpec>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            methods: vec!["refcam".to_string()],
            percentile_p: 20.0,
            smoothgrad: SmoothGradConfig::default(),
            stub: StubConfig::default(),
            external: BTreeMap::new(),
        }
    }
}

/// Resolves a backend name. An `[attribution.external.NAME]` entry wins over
/// the built-in backends (`stub`, `refcam`, `smoothgrad`).
pub fn build_backend(name: &str, config: &AttributionConfig, base: &Path) -> Result<Box<dyn AttributionBackend>> {
    if let Some(spec) = config.external.get(name) {
        let spec = ExternalSpec {
            program: base.join(&spec.program),
            weights: spec.weights.as_ref().map(|w| base.join(w)),
            ..spec.clone()
        };
        return Ok(Box::new(ExternalAttribution::spawn(name, &spec)?));
    }
    match name {
        "stub" => Ok(Box::new(StubAttribution(config.stub.clone()))),
        "refcam" => Ok(Box::new(RefCam)),
        "smoothgrad" => Ok(Box::new(SmoothGrad(config.smoothgrad.clone()))),
        other => Err(AttributionError::BackendFailure(format!(
            "no attribution backend `{other}`; configure [attribution.external.{other}]"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub image_id: String,
    pub method: String,
    pub target_class: usize,
    pub height: usize,
    pub width: usize,
}

/// Writes `{stem}.npy` (float32, shape `[H, W]`) and `{stem}.json`.
pub fn save_map(map: &AttributionMap, image_id: &str, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = BufWriter::new(fs::File::create(dir.join(format!("{stem}.npy")))?);
    let mut w = npyz::WriteOptions::<f32>::new()
        .default_dtype()
        .shape(&[map.height as u64, map.width as u64])
        .writer(file)
        .begin_nd()?;
    w.extend(map.values.iter().copied())?;
    w.finish()?;
    let sidecar = MapSidecar {
        image_id: image_id.to_string(),
        method: map.method.clone(),
        target_class: map.target_class,
        height: map.height,
        width: map.width,
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn load_map(dir: &Path, stem: &str) -> Result<(AttributionMap, MapSidecar)> {
    let sidecar: MapSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)
        .map_err(|e| AttributionError::BackendFailure(e.to_string()))?;
    let npy = npyz::NpyFile::new(fs::File::open(dir.join(format!("{stem}.npy")))?)?;
    let values: Vec<f32> = npy.into_vec()?;
    if values.len() != sidecar.height * sidecar.width {
        return Err(AttributionError::BackendFailure(
            "map size does not match sidecar".into(),
        ));
    }
    let map = AttributionMap::new(
        sidecar.height,
        sidecar.width,
        values,
        sidecar.target_class,
        &sidecar.method,
    );
    Ok((map, sidecar))
}

//! A small convolutional classifier with hand-written backpropagation.
//!
//! conv3x3 → ReLU → 2x2 average pool → conv3x3 → ReLU → global average pool
//! → linear. The second ReLU output is the activation map exposed to
//! CAM-style attribution.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_input, ActivationGradients, Capabilities, ClassifierAdapter, Result};
use crate::ingest::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCnnShape {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for ToyCnnShape {
    fn default() -> Self {
        Self {
            conv1_channels: 8,
            conv2_channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCnn {
    side: usize,
    num_classes: usize,
    shape: ToyCnnShape,
    /// Flat parameter vector; see [`Layout`].
    params: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wf: usize,
    bf: usize,
    end: usize,
}

impl Layout {
    fn new(shape: ToyCnnShape, n: usize) -> Self {
        let (c1, c2) = (shape.conv1_channels, shape.conv2_channels);
        let w1 = 0;
        let b1 = w1 + c1 * 3 * 9;
        let w2 = b1 + c1;
        let b2 = w2 + c2 * c1 * 9;
        let wf = b2 + c2;
        let bf = wf + n * c2;
        Self {
            w1,
            b1,
            w2,
            b2,
            wf,
            bf,
            end: bf + n,
        }
    }
}

struct Cache {
    z1: Vec<f32>,
    pooled: Vec<f32>,
    z2: Vec<f32>,
    a2: Vec<f32>,
    gap: Vec<f32>,
    logits: Vec<f64>,
}

impl ToyCnn {
    /// He-initialized network. `side` must be even.
    pub fn new(num_classes: usize, side: usize, shape: ToyCnnShape, seed: u64) -> Self {
        assert!(side >= 2 && side.is_multiple_of(2), "toy-cnn needs an even input side");
        assert!(num_classes > 0);
        let layout = Layout::new(shape, num_classes);
        let mut params = vec![0.0f32; layout.end];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, gain: f32| {
            let normal = Normal::new(0.0f32, (gain / fan_in as f32).sqrt()).expect("valid std");
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(layout.w1..layout.b1, 27, 2.0);
        fill(layout.w2..layout.b2, shape.conv1_channels * 9, 2.0);
        fill(layout.wf..layout.bf, shape.conv2_channels, 1.0);
        Self {
            side,
            num_classes,
            shape,
            params,
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.shape, self.num_classes)
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn shape(&self) -> ToyCnnShape {
        self.shape
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self).map_err(std::io::Error::other)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let model: Self = serde_json::from_slice(&fs::read(path)?).map_err(std::io::Error::other)?;
        if model.params.len() != model.layout().end || !model.side.is_multiple_of(2) {
            return Err(std::io::Error::other("weights do not match declared shape"));
        }
        Ok(model)
    }

    fn forward(&self, x: &[f32]) -> Cache {
        let l = self.layout();
        let (c1, c2) = (self.shape.conv1_channels, self.shape.conv2_channels);
        let (h, w) = (self.side, self.side);
        let (h2, w2) = (h / 2, w / 2);
        let p = &self.params;

        let z1 = conv3x3_forward(x, 3, h, w, &p[l.w1..l.b1], &p[l.b1..l.w2], c1);
        let a1: Vec<f32> = z1.iter().map(|&v| v.max(0.0)).collect();
        let pooled = avg_pool2(&a1, c1, h, w);
        let z2 = conv3x3_forward(&pooled, c1, h2, w2, &p[l.w2..l.b2], &p[l.b2..l.wf], c2);
        let a2: Vec<f32> = z2.iter().map(|&v| v.max(0.0)).collect();
        let area = (h2 * w2) as f32;
        let gap: Vec<f32> = a2.chunks(h2 * w2).map(|ch| ch.iter().sum::<f32>() / area).collect();
        let logits = (0..self.num_classes)
            .map(|k| {
                let row = &p[l.wf + k * c2..l.wf + (k + 1) * c2];
                let dot: f32 = row.iter().zip(&gap).map(|(a, b)| a * b).sum();
                (dot + p[l.bf + k]) as f64
            })
            .collect();
        Cache {
            z1,
            pooled,
            z2,
            a2,
            gap,
            logits,
        }
    }

    /// Backpropagates `dlogits`. Returns the parameter gradient, the
    /// gradient with respect to the second activation map, and optionally
    /// the input gradient.
    fn backward(
        &self,
        x: &[f32],
        cache: &Cache,
        dlogits: &[f32],
        want_input: bool,
    ) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
        let l = self.layout();
        let (c1, c2) = (self.shape.conv1_channels, self.shape.conv2_channels);
        let (h, w) = (self.side, self.side);
        let (h2, w2) = (h / 2, w / 2);
        let p = &self.params;
        let mut grad = vec![0.0f32; l.end];

        let mut dgap = vec![0.0f32; c2];
        for (k, &dk) in dlogits.iter().enumerate() {
            grad[l.bf + k] = dk;
            for j in 0..c2 {
                grad[l.wf + k * c2 + j] = dk * cache.gap[j];
                dgap[j] += dk * p[l.wf + k * c2 + j];
            }
        }
        let area = (h2 * w2) as f32;
        let mut da2 = vec![0.0f32; c2 * h2 * w2];
        for (j, chunk) in da2.chunks_mut(h2 * w2).enumerate() {
            chunk.fill(dgap[j] / area);
        }
        let dz2: Vec<f32> = da2
            .iter()
            .zip(&cache.z2)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        let (dw2, db2, dpooled) = conv3x3_backward(&cache.pooled, c1, h2, w2, &p[l.w2..l.b2], c2, &dz2, true);
        grad[l.w2..l.b2].copy_from_slice(&dw2);
        grad[l.b2..l.wf].copy_from_slice(&db2);

        let dpooled = dpooled.expect("requested");
        let mut dz1 = vec![0.0f32; c1 * h * w];
        for c in 0..c1 {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let g = dpooled[(c * h2 + y) * w2 + xx] * 0.25;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (c * h + 2 * y + dy) * w + 2 * xx + dx;
                        if cache.z1[i] > 0.0 {
                            dz1[i] = g;
                        }
                    }
                }
            }
        }
        let (dw1, db1, dx) = conv3x3_backward(x, 3, h, w, &p[l.w1..l.b1], c1, &dz1, want_input);
        grad[l.w1..l.b1].copy_from_slice(&dw1);
        grad[l.b1..l.w2].copy_from_slice(&db1);
        (grad, da2, dx)
    }

    pub fn logits_raw(&self, x: &[f32]) -> Vec<f64> {
        self.forward(x).logits
    }

    /// Cross-entropy against `target_dist` and its parameter gradient.
    pub fn loss_and_grad(&self, x: &[f32], target_dist: &[f64]) -> (f64, Vec<f32>) {
        let cache = self.forward(x);
        let probs = super::softmax(&cache.logits);
        let max = cache.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + cache.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss: f64 = target_dist.iter().zip(&cache.logits).map(|(q, z)| -q * (z - lse)).sum();
        let dlogits: Vec<f32> = probs.iter().zip(target_dist).map(|(p, q)| (p - q) as f32).collect();
        let (grad, _, _) = self.backward(x, &cache, &dlogits, false);
        (loss, grad)
    }

    fn one_hot(&self, target: usize) -> Result<Vec<f32>> {
        if target >= self.num_classes {
            return Err(super::ClassifierError::BackendFailure(format!(
                "target class {target} out of range"
            )));
        }
        let mut d = vec![0.0f32; self.num_classes];
        d[target] = 1.0;
        Ok(d)
    }
}

impl ClassifierAdapter for ToyCnn {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            probabilities: true,
            input_gradients: true,
            activation_maps: true,
        }
    }

    fn logits(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        check_input(self, x)?;
        Ok(self.logits_raw(&x.data))
    }

    fn activation_gradients(&self, x: &ImageTensor, target: usize) -> Result<ActivationGradients> {
        check_input(self, x)?;
        let d = self.one_hot(target)?;
        let cache = self.forward(&x.data);
        let (_, da2, _) = self.backward(&x.data, &cache, &d, false);
        Ok(ActivationGradients {
            channels: self.shape.conv2_channels,
            height: self.side / 2,
            width: self.side / 2,
            activations: cache.a2,
            gradients: da2,
        })
    }

    fn input_gradients(&self, x: &ImageTensor, target: usize) -> Result<Vec<f32>> {
        check_input(self, x)?;
        let d = self.one_hot(target)?;
        let cache = self.forward(&x.data);
        let (_, _, dx) = self.backward(&x.data, &cache, &d, true);
        Ok(dx.expect("requested"))
    }
}

/// Output rows `[y0, y1)` and columns `[x0, x1)` that read a valid input
/// pixel for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    ((-d).max(0) as usize, (n as isize - d.max(0)) as usize)
}

fn conv3x3_forward(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0f32; cout * plane];
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, b) in orow.iter_mut().zip(srow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    dout: &[f32],
    want_input: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let plane = h * w;
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = vec![0.0f32; cout];
    let mut din = want_input.then(|| vec![0.0f32; cin * plane]);
    for co in 0..cout {
        let g = &dout[co * plane..(co + 1) * plane];
        db[co] = g.iter().sum();
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f32>();
                        if let Some(din) = din.as_mut() {
                            let drow = &mut din[ci * plane + sy * w + sx0..ci * plane + sy * w + sx0 + (x1 - x0)];
                            for (d, a) in drow.iter_mut().zip(grow) {
                                *d += wv * a;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dw, db, din)
}

fn avg_pool2(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let i = |dy: usize, dx: usize| input[(ch * h + 2 * y + dy) * w + 2 * x + dx];
                out[(ch * h2 + y) * w2 + x] = 0.25 * (i(0, 0) + i(0, 1) + i(1, 0) + i(1, 1));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Normalization;
    use rand::Rng;

    fn random_input(side: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // central finite differences in f64 would need an f64 network; f32 with a
    // coarse step and relative tolerance is enough to catch indexing bugs
    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let side = 6;
        let model = ToyCnn::new(
            3,
            side,
            ToyCnnShape {
                conv1_channels: 2,
                conv2_channels: 3,
            },
            3,
        );
        let x = random_input(side, 4);
        let target = [0.1, 0.7, 0.2];
        let (_, grad) = model.loss_and_grad(&x, &target);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-2f32;
        for _ in 0..40 {
            let i = rng.random_range(0..grad.len());
            let mut plus = model.clone();
            plus.params[i] += eps;
            let mut minus = model.clone();
            minus.params[i] -= eps;
            let numeric = (plus.loss_and_grad(&x, &target).0 - minus.loss_and_grad(&x, &target).0) / (2.0 * eps as f64);
            let analytic = grad[i] as f64;
            assert!(
                (numeric - analytic).abs() <= 2e-3 + 0.05 * analytic.abs(),
                "param {i}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let side = 6;
        let model = ToyCnn::new(
            2,
            side,
            ToyCnnShape {
                conv1_channels: 3,
                conv2_channels: 2,
            },
            8,
        );
        let data = random_input(side, 9);
        let x = ImageTensor::new(side, side, Normalization::Standardized, data.clone());
        let g = model.input_gradients(&x, 1).unwrap();
        let eps = 1e-2f32;
        for i in (0..data.len()).step_by(7) {
            let mut p = data.clone();
            p[i] += eps;
            let mut m = data.clone();
            m[i] -= eps;
            let numeric = (model.logits_raw(&p)[1] - model.logits_raw(&m)[1]) / (2.0 * eps as f64);
            assert!(
                (numeric - g[i] as f64).abs() <= 2e-3 + 0.05 * (g[i] as f64).abs(),
                "input {i}"
            );
        }
    }

    #[test]
    fn activation_gradient_is_linear_head_weight() {
        let model = ToyCnn::new(3, 8, ToyCnnShape::default(), 2);
        let x = ImageTensor::new(8, 8, Normalization::Standardized, random_input(8, 1));
        let ag = model.activation_gradients(&x, 2).unwrap();
        let l = model.layout();
        let c2 = model.shape.conv2_channels;
        for j in 0..c2 {
            let expected = model.params[l.wf + 2 * c2 + j] / 16.0;
            assert!(ag.gradients[j * 16..(j + 1) * 16]
                .iter()
                .all(|&g| (g - expected).abs() < 1e-7));
        }
        // logit = w · mean(activations) + b
        let logits = model.logits_raw(&x.data);
        let recon: f32 = (0..c2)
            .map(|j| model.params[l.wf + 2 * c2 + j] * ag.activations[j * 16..(j + 1) * 16].iter().sum::<f32>() / 16.0)
            .sum::<f32>()
            + model.params[l.bf + 2];
        assert!((recon as f64 - logits[2]).abs() < 1e-5);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyCnn::new(3, 8, ToyCnnShape::default(), 11);
        let p = dir.path().join("m.json");
        model.save(&p).unwrap();
        assert_eq!(ToyCnn::load(&p).unwrap(), model);
    }
}

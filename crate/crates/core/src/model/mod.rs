//! Voxelwise segmenter with a shared feature layer and a task-specific head.
//!
//! `h = tanh(W_f · features + b_f)` is the feature-extraction part shared
//! between the existing-tract and novel-tract models; the head
//! `p = sigmoid(W_h · h + b_h)` has one output per tract. Transfer copies the
//! feature layer and re-initializes the head.

pub mod features;
pub mod train;
pub mod transform;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_range;
use crate::rng::rng_from;
use crate::volume::{BinaryMask3D, TractChannel, TractLabelMap, Volume3D};
use features::{extract_features, FeatureArray, FEATURE_NAMES, N_FEATURES};

pub use train::{train, Trainable, TrainConfig, TrainReport, TrainSample};
pub use transform::{online_transform, OnlineTransformConfig};

pub const CHECKPOINT_FORMAT: &str = "tractaug-segmenter";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense layer, weights stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights `~ U(−a, a)` with `a = sqrt(6 / (inputs + outputs))`, zero bias.
    pub fn glorot_uniform(inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err(Error::Checkpoint(format!("{what}: empty layer")));
        }
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Checkpoint(format!(
                "{what}: shape {}x{} does not match {} weights / {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{what}: non-finite parameter")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterModel {
    pub tracts: Vec<String>,
    pub feature_layer: Layer,
    pub head: Layer,
}

/// Same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub feature_layer: Layer,
    pub head: Layer,
}

impl Gradients {
    fn add(&mut self, other: &Gradients) {
        for (dst, src) in [(&mut self.feature_layer, &other.feature_layer), (&mut self.head, &other.head)] {
            for (a, b) in dst.weights.iter_mut().zip(&src.weights) {
                *a += b;
            }
            for (a, b) in dst.bias.iter_mut().zip(&src.bias) {
                *a += b;
            }
        }
    }
}

/// Voxels per block in the gradient reduction.
const GRADIENT_CHUNK: usize = 256;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    feature_names: Vec<String>,
    tracts: Vec<String>,
    feature_layer: Layer,
    head: Layer,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−[y log σ(z) + (1 − y) log(1 − σ(z))]`, evaluated stably from the logit.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl SegmenterModel {
    pub fn new(tracts: Vec<String>, hidden: usize, seed: u64) -> Result<Self> {
        if tracts.is_empty() || hidden == 0 {
            return Err(Error::Invalid("model needs >= 1 tract and >= 1 hidden unit".into()));
        }
        let n = tracts.len();
        Ok(Self {
            tracts,
            feature_layer: Layer::glorot_uniform(N_FEATURES, hidden, crate::rng::mix(&[seed, 1])),
            head: Layer::glorot_uniform(hidden, n, crate::rng::mix(&[seed, 2])),
        })
    }

    /// Copies the feature layer and attaches a freshly initialized head for
    /// `tracts`.
    pub fn transfer(&self, tracts: Vec<String>, head_seed: u64) -> Result<Self> {
        if tracts.is_empty() {
            return Err(Error::Invalid("transfer needs at least one tract".into()));
        }
        let head = Layer::glorot_uniform(self.hidden(), tracts.len(), head_seed);
        Ok(Self {
            tracts,
            feature_layer: self.feature_layer.clone(),
            head,
        })
    }

    pub fn hidden(&self) -> usize {
        self.feature_layer.outputs
    }

    pub fn n_outputs(&self) -> usize {
        self.head.outputs
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_layer.check("feature layer")?;
        self.head.check("head")?;
        if self.feature_layer.inputs != N_FEATURES {
            return Err(Error::Checkpoint(format!(
                "feature layer expects {} inputs, extractor produces {N_FEATURES}",
                self.feature_layer.inputs
            )));
        }
        if self.head.inputs != self.hidden() || self.head.outputs != self.tracts.len() {
            return Err(Error::Checkpoint("head shape does not match hidden size / tract list".into()));
        }
        Ok(())
    }

    /// Hidden activations and logits for one voxel.
    #[inline]
    fn forward_one(&self, row: &[f32], hidden: &mut [f64], logits: &mut [f64]) {
        let f = &self.feature_layer;
        for (k, h) in hidden.iter_mut().enumerate() {
            let w = &f.weights[k * f.inputs..(k + 1) * f.inputs];
            let mut acc = f.bias[k];
            for (wi, &xi) in w.iter().zip(row) {
                acc += wi * xi as f64;
            }
            *h = acc.tanh();
        }
        let hd = &self.head;
        for (t, z) in logits.iter_mut().enumerate() {
            let w = &hd.weights[t * hd.inputs..(t + 1) * hd.inputs];
            let mut acc = hd.bias[t];
            for (wi, hi) in w.iter().zip(hidden.iter()) {
                acc += wi * hi;
            }
            *z = acc;
        }
    }

    /// Logits, row-major `n_voxels × n_outputs`.
    pub fn logits(&self, features: &FeatureArray) -> Result<Vec<f64>> {
        if !features.as_slice().len().is_multiple_of(self.feature_layer.inputs) {
            return Err(Error::Invalid("feature dimension does not match model".into()));
        }
        let t = self.n_outputs();
        let mut hidden = vec![0.0; self.hidden()];
        let mut out = vec![0.0; features.len() * t];
        for v in 0..features.len() {
            self.forward_one(features.row(v), &mut hidden, &mut out[v * t..(v + 1) * t]);
        }
        Ok(out)
    }

    /// Per-voxel, per-tract probabilities, row-major `n_voxels × n_outputs`.
    pub fn forward(&self, features: &FeatureArray) -> Result<Vec<f64>> {
        Ok(self.logits(features)?.into_iter().map(sigmoid).collect())
    }

    /// Mean BCE over voxels and tracts, and its gradient.
    ///
    /// `labels` is row-major `n_voxels × n_outputs` with entries 0 or 1.
    /// When `head_only` is set the feature-layer gradient is left at zero.
    /// Voxels are processed in fixed chunks whose partial sums are added in
    /// chunk order, so the result does not depend on the worker count.
    pub fn loss_and_gradients(&self, features: &FeatureArray, labels: &[f32], head_only: bool) -> (f64, Gradients) {
        let t_n = self.n_outputs();
        let n = features.len();
        assert_eq!(labels.len(), n * t_n, "labels must be n_voxels x n_outputs");
        let mut total = Gradients {
            feature_layer: Layer::zeros(self.feature_layer.inputs, self.hidden()),
            head: Layer::zeros(self.hidden(), t_n),
        };
        if n == 0 {
            return (0.0, total);
        }
        let scale = 1.0 / (n * t_n) as f64;
        let rows = features.as_slice();
        let chunks = n.div_ceil(GRADIENT_CHUNK);
        let parts = par_range(chunks, |c| {
            let lo = c * GRADIENT_CHUNK;
            let hi = (lo + GRADIENT_CHUNK).min(n);
            self.accumulate(
                &rows[lo * N_FEATURES..hi * N_FEATURES],
                &labels[lo * t_n..hi * t_n],
                head_only,
                scale,
            )
        });
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            total.add(&g);
        }
        (loss, total)
    }

    /// Scaled loss and gradient sums over a block of voxels.
    fn accumulate(&self, rows: &[f32], labels: &[f32], head_only: bool, scale: f64) -> (f64, Gradients) {
        let h_n = self.hidden();
        let t_n = self.n_outputs();
        let f_n = self.feature_layer.inputs;
        let mut g = Gradients {
            feature_layer: Layer::zeros(f_n, h_n),
            head: Layer::zeros(h_n, t_n),
        };
        let mut hidden = vec![0.0; h_n];
        let mut logits = vec![0.0; t_n];
        let mut d_hidden = vec![0.0; h_n];
        let mut loss = 0.0;
        for (row, y_row) in rows.chunks_exact(f_n).zip(labels.chunks_exact(t_n)) {
            self.forward_one(row, &mut hidden, &mut logits);
            d_hidden.iter_mut().for_each(|d| *d = 0.0);
            for t in 0..t_n {
                let y = y_row[t] as f64;
                let z = logits[t];
                loss += bce_with_logit(z, y);
                let dz = (sigmoid(z) - y) * scale;
                g.head.bias[t] += dz;
                let gw = &mut g.head.weights[t * h_n..(t + 1) * h_n];
                let w = &self.head.weights[t * h_n..(t + 1) * h_n];
                for k in 0..h_n {
                    gw[k] += dz * hidden[k];
                    d_hidden[k] += dz * w[k];
                }
            }
            if !head_only {
                for k in 0..h_n {
                    let da = d_hidden[k] * (1.0 - hidden[k] * hidden[k]);
                    g.feature_layer.bias[k] += da;
                    let gw = &mut g.feature_layer.weights[k * f_n..(k + 1) * f_n];
                    for (gwi, &xi) in gw.iter_mut().zip(row) {
                        *gwi += da * xi as f64;
                    }
                }
            }
        }
        (loss * scale, g)
    }

    /// Mean BCE only.
    pub fn loss(&self, features: &FeatureArray, labels: &[f32]) -> f64 {
        let t_n = self.n_outputs();
        let logits = self.logits(features).expect("feature dims checked by caller");
        let total: f64 = logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_with_logit(z, y as f64))
            .sum();
        total / (features.len() * t_n) as f64
    }

    /// Thresholds probabilities at 0.5 (a probability of exactly 0.5 is
    /// foreground).
    pub fn predict(&self, x: &Volume3D) -> Result<TractLabelMap> {
        let features = extract_features(x);
        self.predict_features(&features, x.geometry())
    }

    pub fn predict_features(&self, features: &FeatureArray, geometry: &crate::volume::Geometry) -> Result<TractLabelMap> {
        if features.len() != geometry.len() {
            return Err(Error::Invalid("feature count does not match geometry".into()));
        }
        let logits = self.logits(features)?;
        let t_n = self.n_outputs();
        let channels = self
            .tracts
            .iter()
            .enumerate()
            .map(|(t, name)| {
                let data = (0..features.len()).map(|v| logits[v * t_n + t] >= 0.0).collect();
                Ok(TractChannel {
                    name: name.clone(),
                    mask: BinaryMask3D::from_vec(geometry.clone(), data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TractLabelMap::new(channels)
    }

    pub fn to_json(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            tracts: self.tracts.clone(),
            feature_layer: self.feature_layer.clone(),
            head: self.head.clone(),
        };
        let mut s = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.feature_names != FEATURE_NAMES {
            return Err(Error::Checkpoint(format!("feature set {:?} is not supported", ckpt.feature_names)));
        }
        let model = Self {
            tracts: ckpt.tracts,
            feature_layer: ckpt.feature_layer,
            head: ckpt.head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("T{i}")).collect()
    }

    fn random_features(n: usize, seed: u64) -> FeatureArray {
        let mut rng = rng_from(seed);
        FeatureArray::from_rows((0..n * N_FEATURES).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn gradients_match_central_differences() {
        let model = SegmenterModel::new(names(2), 4, 5).unwrap();
        let x = random_features(5, 6);
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let (_, g) = model.loss_and_gradients(&x, &y, false);
        let h = 1e-5;
        let mut checked = 0;
        for layer in 0..2 {
            let grad = if layer == 0 { &g.feature_layer } else { &g.head };
            let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
            for (p, &a) in analytic.iter().enumerate() {
                let loss_at = |d: f64| {
                    let mut m = model.clone();
                    let l = if layer == 0 { &mut m.feature_layer } else { &mut m.head };
                    let nw = l.weights.len();
                    if p < nw {
                        l.weights[p] += d;
                    } else {
                        l.bias[p - nw] += d;
                    }
                    m.loss(&x, &y)
                };
                let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {layer} param {p}: {a} vs {numeric}");
                checked += 1;
            }
        }
        assert_eq!(checked, 4 * N_FEATURES + 4 + 2 * 4 + 2);
    }

    #[test]
    fn zero_model_gives_half() {
        let mut m = SegmenterModel::new(names(2), 3, 0).unwrap();
        m.feature_layer = Layer::zeros(N_FEATURES, 3);
        m.head = Layer::zeros(3, 2);
        let p = m.forward(&random_features(5, 1)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_bias_monotone() {
        let mut m = SegmenterModel::new(names(1), 4, 3).unwrap();
        let f = random_features(10, 2);
        m.head.bias[0] = -10.0;
        let lo = m.forward(&f).unwrap();
        m.head.bias[0] = 10.0;
        let hi = m.forward(&f).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            assert!(a < b);
            assert!(*a > 0.0 && *b < 1.0);
        }
    }

    #[allow(clippy::needless_range_loop)]
    #[test]
    fn forward_matches_naive_loops() {
        let m = SegmenterModel::new(names(3), 5, 42).unwrap();
        let f = random_features(8, 7);
        let p = m.forward(&f).unwrap();
        for v in 0..8 {
            let row = f.row(v);
            let mut h = [0.0f64; 5];
            for k in 0..5 {
                let mut a = m.feature_layer.bias[k];
                for i in 0..N_FEATURES {
                    a += m.feature_layer.weights[k * N_FEATURES + i] * row[i] as f64;
                }
                h[k] = a.tanh();
            }
            for t in 0..3 {
                let mut z = m.head.bias[t];
                for k in 0..5 {
                    z += m.head.weights[t * 5 + k] * h[k];
                }
                let expected = 1.0 / (1.0 + (-z).exp());
                assert!((p[v * 3 + t] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stable_bce() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(800.0, 1.0) < 1e-300 + 1e-12);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn predict_threshold_and_empty() {
        let g = Geometry::cube(3);
        let x = Volume3D::filled(g, 1.0);
        let mut m = SegmenterModel::new(names(2), 2, 0).unwrap();
        m.feature_layer = Layer::zeros(N_FEATURES, 2);
        m.head = Layer::zeros(2, 2);
        // logit 0 -> probability exactly 0.5 -> foreground
        m.head.bias = vec![0.0, -10.0];
        let pred = m.predict(&x).unwrap();
        assert_eq!(pred.mask(0).count(), 27);
        assert!(pred.mask(1).is_empty());
        assert_eq!(pred.names().collect::<Vec<_>>(), ["T0", "T1"]);
    }

    #[test]
    fn transfer_keeps_features() {
        let m = SegmenterModel::new(names(6), 8, 1).unwrap();
        let n = m.transfer(names(4), 99).unwrap();
        assert_eq!(n.feature_layer, m.feature_layer);
        assert_eq!(n.n_outputs(), 4);
        assert_ne!(n.head.weights[..8], m.head.weights[..8]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SegmenterModel::new(names(3), 4, 5).unwrap();
        let text = m.to_json();
        let back = SegmenterModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
        let broken = text.replace(CHECKPOINT_FORMAT, "other");
        assert!(SegmenterModel::from_json(&broken).is_err());
    }
}

//! Minibatch training with Adamax on the voxelwise BCE loss.
//!
//! An epoch visits every training sample once. From each sample it draws
//! `voxels_per_sample` voxels, a `foreground_fraction` share of them from the
//! union of the sample's labels and the rest uniformly from the volume, after
//! an optional online transform. Intensity scale and shift are applied to the
//! extracted features directly; noise and flips transform the volume first.
//! The pooled voxels are shuffled and cut into
//! batches of `batch_size`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{apply_intensity_affine, extract_features, extract_features_at, FeatureArray, N_FEATURES};
use super::transform::{draw_intensity, needs_volume, online_transform, OnlineTransformConfig};
use super::SegmenterModel;
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::parallel::par_map;
use crate::rng::{mix, rng_from, stream_id, Rng64};
use crate::volume::{TractLabelMap, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Only the task-specific head learns; the feature layer is frozen.
    HeadOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Voxels per optimizer step.
    pub batch_size: usize,
    pub voxels_per_sample: usize,
    pub foreground_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub trainable: Trainable,
    pub transforms: OnlineTransformConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 50,
            batch_size: 4096,
            voxels_per_sample: 4096,
            foreground_fraction: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            trainable: Trainable::All,
            transforms: OnlineTransformConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.voxels_per_sample == 0 {
            return Err(Error::Invalid("epochs, batch_size and voxels_per_sample must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::Invalid("foreground_fraction must be in [0, 1]".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::Invalid("Adamax needs beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        self.transforms.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub image: &'a Volume3D,
    pub labels: &'a TractLabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch (averaged over the epoch's batches,
    /// each evaluated before its update).
    pub loss_curve: Vec<f64>,
    /// Mean Dice over tracts on the validation sample after each epoch.
    pub validation_dice: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned.
    pub best_epoch: usize,
    pub steps: usize,
}

/// Adamax:
///
/// ```text
/// m ← β1·m + (1 − β1)·g
/// u ← max(β2·u, |g|)
/// θ ← θ − lr / (1 − β1^t) · m / (u + ε)
/// ```
#[derive(Debug, Clone)]
pub struct Adamax {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adamax {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter group. Groups must be passed in the same
    /// order and with the same lengths on every call.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.state.is_empty() {
            self.state = grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
        }
        self.t += 1;
        let step = self.learning_rate / (1.0 - self.beta1.powi(self.t));
        for ((p, g), (m, u)) in params.iter_mut().zip(grads).zip(&mut self.state) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                u[i] = (self.beta2 * u[i]).max(g[i].abs());
                p[i] -= step * m[i] / (u[i] + self.epsilon);
            }
        }
    }
}

fn check_sample(model: &SegmenterModel, s: &TrainSample<'_>) -> Result<()> {
    s.image.geometry().ensure_same(s.labels.geometry())?;
    if !s.labels.names().eq(model.tracts.iter().map(String::as_str)) {
        return Err(Error::Invalid(format!(
            "label channels {:?} do not match model tracts {:?}",
            s.labels.names().collect::<Vec<_>>(),
            model.tracts
        )));
    }
    Ok(())
}

/// Voxels inside at least one tract.
fn foreground_pool(labels: &TractLabelMap) -> Vec<usize> {
    (0..labels.geometry().len())
        .filter(|&i| labels.channels().iter().any(|c| c.mask.data()[i]))
        .collect()
}

fn draw_voxels(pool: &[usize], len: usize, n: usize, fg_fraction: f64, rng: &mut Rng64) -> Vec<usize> {
    let n_fg = if pool.is_empty() { 0 } else { (n as f64 * fg_fraction).round() as usize };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_fg {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    for _ in n_fg..n {
        out.push(rng.random_range(0..len));
    }
    out
}

pub(crate) fn mean_dice(pred: &TractLabelMap, truth: &TractLabelMap) -> Result<f64> {
    pred.ensure_aligned(truth)?;
    let mut total = 0.0;
    for (p, t) in pred.channels().iter().zip(truth.channels()) {
        total += dice(&p.mask, &t.mask)?;
    }
    Ok(total / pred.len() as f64)
}

/// Trains a copy of `model` and returns the parameters of the epoch with the
/// best validation Dice (earliest on ties), or of the last epoch when no
/// validation sample is given.
pub fn train(
    model: &SegmenterModel,
    samples: &[TrainSample<'_>],
    validation: Option<&TrainSample<'_>>,
    config: &TrainConfig,
) -> Result<(SegmenterModel, TrainReport)> {
    config.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training needs at least one sample"));
    }
    for s in samples.iter().chain(validation) {
        check_sample(model, s)?;
    }
    let head_only = config.trainable == Trainable::HeadOnly;
    let t_n = model.n_outputs();
    let val_features = validation.map(|v| extract_features(v.image));

    // Without noise or flips every epoch sees the same volumes, so features
    // and foreground pools are computed once.
    let caches: Vec<Option<(FeatureArray, Vec<usize>)>> = if needs_volume(&config.transforms) {
        samples.iter().map(|_| None).collect()
    } else {
        par_map(samples, |s| Some((extract_features(s.image), foreground_pool(s.labels))))
    };

    let mut model = model.clone();
    let mut opt = Adamax::new(config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut report = TrainReport {
        loss_curve: Vec::with_capacity(config.epochs),
        validation_dice: Vec::new(),
        best_epoch: config.epochs - 1,
        steps: 0,
    };
    let mut best: Option<(f64, SegmenterModel)> = None;

    for epoch in 0..config.epochs {
        let mut rows: Vec<f32> = Vec::with_capacity(samples.len() * config.voxels_per_sample * N_FEATURES);
        let mut targets = Vec::with_capacity(samples.len() * config.voxels_per_sample * t_n);
        for (si, (s, cache)) in samples.iter().zip(&caches).enumerate() {
            let mut rng = rng_from(mix(&[config.seed, stream_id("train-sample"), epoch as u64, si as u64]));
            match cache {
                Some((features, pool)) => {
                    let (scale, shift) = if config.transforms.enabled {
                        draw_intensity(&config.transforms, &mut rng)
                    } else {
                        (1.0, 0.0)
                    };
                    let voxels = draw_voxels(pool, features.len(), config.voxels_per_sample, config.foreground_fraction, &mut rng);
                    for &v in &voxels {
                        let mut row: [f32; N_FEATURES] = features.row(v).try_into().expect("row width");
                        if config.transforms.enabled {
                            apply_intensity_affine(&mut row, scale, shift);
                        }
                        rows.extend_from_slice(&row);
                        targets.extend(s.labels.channels().iter().map(|c| c.mask.data()[v] as u8 as f32));
                    }
                }
                None => {
                    let (image, labels) = online_transform(s.image, s.labels, &config.transforms, &mut rng)?;
                    let pool = foreground_pool(&labels);
                    let voxels = draw_voxels(&pool, labels.geometry().len(), config.voxels_per_sample, config.foreground_fraction, &mut rng);
                    rows.extend_from_slice(extract_features_at(&image, &voxels).as_slice());
                    for &v in &voxels {
                        targets.extend(labels.channels().iter().map(|c| c.mask.data()[v] as u8 as f32));
                    }
                }
            }
        }
        let total = targets.len() / t_n;
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng_from(mix(&[config.seed, stream_id("train-shuffle"), epoch as u64])));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut bx = FeatureArray::with_capacity(batch.len());
            let mut by = Vec::with_capacity(batch.len() * t_n);
            for &i in batch {
                bx.push(rows[i * N_FEATURES..(i + 1) * N_FEATURES].try_into().expect("row width"));
                by.extend_from_slice(&targets[i * t_n..(i + 1) * t_n]);
            }
            let (loss, g) = model.loss_and_gradients(&bx, &by, head_only);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            if head_only {
                opt.step(
                    &mut [&mut model.head.weights, &mut model.head.bias],
                    &[&g.head.weights, &g.head.bias],
                );
            } else {
                opt.step(
                    &mut [
                        &mut model.feature_layer.weights,
                        &mut model.feature_layer.bias,
                        &mut model.head.weights,
                        &mut model.head.bias,
                    ],
                    &[&g.feature_layer.weights, &g.feature_layer.bias, &g.head.weights, &g.head.bias],
                );
            }
            report.steps += 1;
        }
        let epoch_loss = epoch_loss / total as f64;
        report.loss_curve.push(epoch_loss);
        log::debug!("epoch {epoch}: loss {epoch_loss:.5}");

        if let (Some(v), Some(vf)) = (validation, &val_features) {
            let pred = model.predict_features(vf, v.image.geometry())?;
            let d = mean_dice(&pred, v.labels)?;
            report.validation_dice.push(d);
            if best.as_ref().is_none_or(|(b, _)| d > *b) {
                best = Some((d, model.clone()));
                report.best_epoch = epoch;
            }
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::volume::{BinaryMask3D, Geometry};

    /// 10×10×1 volume, left half dark and unlabelled, right half bright and
    /// labelled.
    fn separable() -> (Volume3D, TractLabelMap) {
        let g = Geometry::new([10, 10, 1], [1.0; 3]).unwrap();
        let x = Volume3D::from_vec(g.clone(), (0..100).map(|i| if i % 10 < 5 { 0.0 } else { 1.0 }).collect()).unwrap();
        let m = BinaryMask3D::from_fn(g, |x, _, _| x >= 5);
        (x, TractLabelMap::from_pairs([("T", m)]).unwrap())
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 40,
            batch_size: 100,
            voxels_per_sample: 100,
            foreground_fraction: 0.0,
            transforms: OnlineTransformConfig::disabled(),
            ..Default::default()
        }
    }

    #[test]
    fn separable_toy_converges() {
        let (x, y) = separable();
        let model = SegmenterModel::new(vec!["T".into()], 4, 3).unwrap();
        let s = TrainSample { image: &x, labels: &y };
        let (trained, report) = train(&model, &[s], None, &toy_config()).unwrap();
        for w in report.loss_curve[..10].windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss went up: {:?}", &report.loss_curve[..10]);
        }
        let pred = trained.predict(&x).unwrap();
        assert_eq!(pred.mask(0), y.mask(0), "final accuracy must be 100%");
    }

    #[test]
    fn head_only_freezes_features() {
        let (x, y) = separable();
        let model = SegmenterModel::new(vec!["T".into()], 4, 3).unwrap();
        let s = TrainSample { image: &x, labels: &y };
        let cfg = TrainConfig {
            trainable: Trainable::HeadOnly,
            ..toy_config()
        };
        let (trained, _) = train(&model, &[s], Some(&s), &cfg).unwrap();
        assert_eq!(trained.feature_layer, model.feature_layer);
        assert_ne!(trained.head, model.head);
    }

    #[test]
    fn deterministic() {
        let (x, y) = separable();
        let model = SegmenterModel::new(vec!["T".into()], 4, 3).unwrap();
        let s = TrainSample { image: &x, labels: &y };
        let cfg = TrainConfig {
            transforms: OnlineTransformConfig {
                noise_sigma: 0.05,
                flip_probability: 0.5,
                ..Default::default()
            },
            foreground_fraction: 0.5,
            batch_size: 16,
            epochs: 5,
            ..toy_config()
        };
        let a = train(&model, &[s, s], Some(&s), &cfg).unwrap();
        let b = train(&model, &[s, s], Some(&s), &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&model, &[s, s], Some(&s), &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn best_epoch_is_returned() {
        let (x, y) = separable();
        let model = SegmenterModel::new(vec!["T".into()], 4, 3).unwrap();
        let s = TrainSample { image: &x, labels: &y };
        let (_, report) = train(&model, &[s], Some(&s), &toy_config()).unwrap();
        let best = report
            .validation_dice
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.validation_dice[report.best_epoch], best);
        assert!(report.validation_dice[..report.best_epoch].iter().all(|&d| d < best));
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = separable();
        let mut model = SegmenterModel::new(vec!["T".into()], 2, 0).unwrap();
        model.feature_layer = Layer::zeros(N_FEATURES, 2);
        model.head.bias[0] = f64::NAN;
        let s = TrainSample { image: &x, labels: &y };
        // NaN parameters are rejected up front
        assert!(matches!(train(&model, &[s], None, &toy_config()), Err(Error::Checkpoint(_))));
        // finite but enormous head weights overflow the logits
        let mut model = SegmenterModel::new(vec!["T".into()], 4, 0).unwrap();
        model.head.weights = vec![f64::MAX; 4];
        let err = train(&model, &[s], None, &toy_config()).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    #[test]
    fn mismatched_labels_rejected() {
        let (x, y) = separable();
        let model = SegmenterModel::new(vec!["U".into()], 2, 0).unwrap();
        let s = TrainSample { image: &x, labels: &y };
        assert!(train(&model, &[s], None, &toy_config()).is_err());
        assert!(train(&model, &[], None, &toy_config()).is_err());
    }

    /// `|Δθ| ≤ lr · (1 − β1)(1 − ρ^t) / ((1 − β1^t)(1 − ρ))` with `ρ = β1/β2`,
    /// which follows from `|m_t| ≤ (1 − β1) Σ β1^k |g_{t−k}|` and
    /// `|g_{t−k}| ≤ u_t / β2^k`.
    #[test]
    fn adamax_step_bounded_by_lr() {
        let lr = 0.001;
        let (b1, b2) = (0.9f64, 0.999f64);
        let mut opt = Adamax::new(lr, b1, b2, 1e-8);
        let mut rng = rng_from(5);
        let mut p = vec![0.0f64; 32];
        let rho = b1 / b2;
        for t in 1..=500 {
            let g: Vec<f64> = (0..32)
                .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-4..4)))
                .collect();
            let before = p.clone();
            opt.step(&mut [&mut p], &[&g]);
            let bound = lr * (1.0 - b1) * (1.0 - rho.powi(t)) / ((1.0 - b1.powi(t)) * (1.0 - rho));
            for (a, b) in before.iter().zip(&p) {
                assert!((b - a).abs() <= bound * (1.0 + 1e-12), "step {t}: {}", (b - a).abs());
            }
            assert!(bound <= lr * 1.01);
        }
        assert_eq!(opt.steps(), 500);
    }
}

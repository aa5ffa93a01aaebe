//! Pretraining on existing tracts, transfer to novel tracts, and the
//! end-to-end experiment.
//!
//! Transfer protocols:
//!
//! | method | warmup (head only)            | fine-tune (all weights) |
//! |--------|-------------------------------|-------------------------|
//! | CFT    | none                          | the real scan           |
//! | IFT    | the real scan                 | the real scan           |
//! | Ours   | synthetic scans (+ real scan) | the real scan           |
//!
//! Ours trains one network per augmentation strategy and combines their
//! predictions by majority vote.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{generate_dataset, AugmentationPlan, Strategy};
use crate::ensemble::majority_vote;
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, DatasetManifest, LabelPath, LoadedManifest, ManifestEntry, Provenance};
use crate::metrics::{aggregate, dice, paired_t_test, DiceReport, TTest};
use crate::model::features::extract_features;
use crate::model::train::mean_dice;
use crate::model::{train, SegmenterModel, TrainConfig, TrainSample, Trainable};
use crate::nifti::{write_label_map, write_volume};
use crate::parallel::par_map;
use crate::phantom::{generate_splits, PhantomSample, PhantomSpec};
use crate::rng::{mix, stream_id};
use crate::volume::{TractLabelMap, Volume3D};

pub const REPORT_VERSION: u32 = 1;

/// An annotated scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: Volume3D,
    pub labels: TractLabelMap,
}

impl Subject {
    pub fn as_sample(&self) -> TrainSample<'_> {
        TrainSample {
            image: &self.image,
            labels: &self.labels,
        }
    }

    pub fn tracts(&self) -> Vec<String> {
        self.labels.names().map(String::from).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptationStrategy {
    Cft,
    Ift,
    Ours {
        #[serde(default = "all_strategies")]
        strategies: Vec<Strategy>,
    },
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl AdaptationStrategy {
    pub fn validate(&self) -> Result<()> {
        if let AdaptationStrategy::Ours { strategies } = self {
            validate_strategies(strategies)?;
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdaptationStrategy::Cft => "CFT",
            AdaptationStrategy::Ift => "IFT",
            AdaptationStrategy::Ours { .. } => "Ours",
        }
    }
}

fn validate_strategies(strategies: &[Strategy]) -> Result<()> {
    if strategies.is_empty() {
        return Err(Error::Invalid("Ours needs at least one augmentation strategy".into()));
    }
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(Error::Invalid(format!("augmentation strategy {s} listed twice")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Warmup,
    Finetune,
}

impl Stage {
    fn trainable(self) -> Trainable {
        match self {
            Stage::Warmup => Trainable::HeadOnly,
            Stage::Pretrain | Stage::Finetune => Trainable::All,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Warmup => "warmup",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSample {
    pub sample_id: String,
    pub provenance: Provenance,
}

/// What a training stage saw and how it went. `report` is `None` when the
/// stage was configured with zero epochs and skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub method: String,
    pub stage: Stage,
    pub trainable: Trainable,
    pub samples: Vec<StageSample>,
    pub report: Option<crate::model::TrainReport>,
}

impl StageRecord {
    pub fn synthetic_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| matches!(s.provenance, Provenance::Synthetic { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub method: String,
    pub model: SegmenterModel,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub warmup: TrainConfig,
    pub finetune: TrainConfig,
    pub head_seed: u64,
    pub augment_seed: u64,
    /// Whether the real scan joins the synthetic ones in the Ours warmup.
    pub warmup_includes_real: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let stages = StageConfigs::default();
        Self {
            warmup: stages.warmup,
            finetune: stages.finetune,
            head_seed: 0,
            augment_seed: 0,
            warmup_includes_real: true,
        }
    }
}

fn real(subject: &Subject) -> StageSample {
    StageSample {
        sample_id: subject.id.clone(),
        provenance: Provenance::Real,
    }
}

/// Trains one stage, or passes the model through when `config.epochs == 0`.
fn run_stage(
    model: &SegmenterModel,
    method: &str,
    stage: Stage,
    samples: &[(StageSample, TrainSample<'_>)],
    validation: Option<&TrainSample<'_>>,
    config: &TrainConfig,
) -> Result<(SegmenterModel, StageRecord)> {
    let mut record = StageRecord {
        method: method.to_string(),
        stage,
        trainable: stage.trainable(),
        samples: samples.iter().map(|(s, _)| s.clone()).collect(),
        report: None,
    };
    if config.epochs == 0 {
        return Ok((model.clone(), record));
    }
    let config = TrainConfig {
        trainable: stage.trainable(),
        ..config.clone()
    };
    let train_samples: Vec<TrainSample<'_>> = samples.iter().map(|(_, t)| *t).collect();
    let (trained, report) =
        train(model, &train_samples, validation, &config).map_err(|e| e.in_stage(format!("{method}/{stage}")))?;
    log::info!(
        "{method}/{stage}: {} samples, {} steps, final loss {:.4}, best epoch {}",
        samples.len(),
        report.steps,
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        report.best_epoch
    );
    record.report = Some(report);
    Ok((trained, record))
}

/// Trains the existing-tract model `M_e` from scratch.
pub fn pretrain(
    subjects: &[Subject],
    hidden: usize,
    init_seed: u64,
    config: &TrainConfig,
) -> Result<(SegmenterModel, StageRecord)> {
    let first = subjects.first().ok_or(Error::Empty("pretraining needs at least one subject"))?;
    let model = SegmenterModel::new(first.tracts(), hidden, init_seed)?;
    let samples: Vec<_> = subjects.iter().map(|s| (real(s), s.as_sample())).collect();
    run_stage(&model, "pretrain", Stage::Pretrain, &samples, None, config)
}

/// Classic fine-tuning: fresh head, then all weights on the real scan.
pub fn adapt_cft(model_e: &SegmenterModel, one_shot: &Subject, config: &AdaptConfig) -> Result<Adapted> {
    let m = model_e.transfer(one_shot.tracts(), config.head_seed)?;
    let sample = one_shot.as_sample();
    let (m, rec) = run_stage(
        &m,
        "CFT",
        Stage::Finetune,
        &[(real(one_shot), sample)],
        Some(&sample),
        &config.finetune,
    )?;
    Ok(Adapted {
        method: "CFT".into(),
        model: m,
        stages: vec![rec],
    })
}

/// Improved fine-tuning: head-only warmup on the real scan, then all weights.
pub fn adapt_ift(model_e: &SegmenterModel, one_shot: &Subject, config: &AdaptConfig) -> Result<Adapted> {
    let m = model_e.transfer(one_shot.tracts(), config.head_seed)?;
    let sample = one_shot.as_sample();
    let data = [(real(one_shot), sample)];
    let (m, warm) = run_stage(&m, "IFT", Stage::Warmup, &data, Some(&sample), &config.warmup)?;
    let (m, fine) = run_stage(&m, "IFT", Stage::Finetune, &data, Some(&sample), &config.finetune)?;
    Ok(Adapted {
        method: "IFT".into(),
        model: m,
        stages: vec![warm, fine],
    })
}

/// One network per augmentation strategy: head-only warmup on that
/// strategy's synthetic scans, then fine-tuning on the real scan alone.
pub fn adapt_ours(
    model_e: &SegmenterModel,
    one_shot: &Subject,
    strategies: &[Strategy],
    config: &AdaptConfig,
) -> Result<Vec<Adapted>> {
    validate_strategies(strategies)?;
    par_map(strategies, |&strategy| adapt_one(model_e, one_shot, strategy, config))
        .into_iter()
        .collect()
}

fn adapt_one(model_e: &SegmenterModel, one_shot: &Subject, strategy: Strategy, config: &AdaptConfig) -> Result<Adapted> {
    let method = strategy.name();
    let plan = AugmentationPlan::for_labels(strategy, &one_shot.labels, config.augment_seed);
    let synthetic = generate_dataset(&one_shot.image, &one_shot.labels, &plan)
        .map_err(|e| e.in_stage(format!("{method}/augment")))?;
    let mut warm_data: Vec<(StageSample, TrainSample<'_>)> = synthetic
        .iter()
        .map(|s| {
            (
                StageSample {
                    sample_id: format!("{}-{method}-{:03}", one_shot.id, s.index),
                    provenance: Provenance::Synthetic {
                        strategy,
                        seed: s.seed,
                        sample_index: s.index,
                    },
                },
                TrainSample {
                    image: &s.image,
                    labels: &s.labels,
                },
            )
        })
        .collect();
    let sample = one_shot.as_sample();
    if config.warmup_includes_real {
        warm_data.push((real(one_shot), sample));
    }
    let m = model_e.transfer(one_shot.tracts(), config.head_seed)?;
    let (m, warm) = run_stage(&m, method, Stage::Warmup, &warm_data, Some(&sample), &config.warmup)?;
    let (m, fine) = run_stage(
        &m,
        method,
        Stage::Finetune,
        &[(real(one_shot), sample)],
        Some(&sample),
        &config.finetune,
    )?;
    Ok(Adapted {
        method: method.into(),
        model: m,
        stages: vec![warm, fine],
    })
}

/// Runs one transfer method; CFT and IFT yield a single network.
pub fn adapt(
    model_e: &SegmenterModel,
    one_shot: &Subject,
    method: &AdaptationStrategy,
    config: &AdaptConfig,
) -> Result<Vec<Adapted>> {
    method.validate()?;
    match method {
        AdaptationStrategy::Cft => Ok(vec![adapt_cft(model_e, one_shot, config)?]),
        AdaptationStrategy::Ift => Ok(vec![adapt_ift(model_e, one_shot, config)?]),
        AdaptationStrategy::Ours { strategies } => adapt_ours(model_e, one_shot, strategies, config),
    }
}

/// Majority vote over the per-strategy networks.
pub fn predict_ensemble(models: &[SegmenterModel], x: &Volume3D) -> Result<TractLabelMap> {
    let features = extract_features(x);
    let preds = models
        .iter()
        .map(|m| m.predict_features(&features, x.geometry()))
        .collect::<Result<Vec<_>>>()?;
    majority_vote(&preds)
}

// ---------------------------------------------------------------------------
// experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic subjects. The population seed is mixed with the master
    /// seed, so each master seed gets its own anatomy.
    Phantom {
        #[serde(default)]
        spec: PhantomSpec,
        #[serde(default = "default_n_pretrain")]
        n_pretrain: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    /// Dataset manifests. `one_shot` must hold exactly one real entry.
    Manifests {
        pretrain: PathBuf,
        one_shot: PathBuf,
        test: PathBuf,
    },
}

fn default_n_pretrain() -> usize {
    10
}

fn default_n_test() -> usize {
    16
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Phantom {
            spec: PhantomSpec::default(),
            n_pretrain: default_n_pretrain(),
            n_test: default_n_test(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub pretrain: TrainConfig,
    pub warmup: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        let base = TrainConfig {
            batch_size: 32,
            voxels_per_sample: 4096,
            ..TrainConfig::default()
        };
        Self {
            pretrain: TrainConfig {
                epochs: 1600,
                voxels_per_sample: 512,
                ..base.clone()
            },
            warmup: TrainConfig {
                epochs: 10,
                trainable: Trainable::HeadOnly,
                ..base.clone()
            },
            finetune: TrainConfig { epochs: 5, ..base },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write the input subjects (phantom source only) as NIfTI + manifests.
    pub write_data: bool,
    pub write_predictions: bool,
    pub write_checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            write_data: true,
            write_predictions: true,
            write_checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stages: StageConfigs,
    /// Augmentation strategies behind the Ours ensemble.
    pub strategies: Vec<Strategy>,
    pub warmup_includes_real: bool,
    pub seed: u64,
    pub outputs: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stages: StageConfigs::default(),
            strategies: all_strategies(),
            warmup_includes_real: true,
            seed: 0,
            outputs: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Phantom { spec, n_pretrain, n_test } => {
                spec.validate()?;
                if *n_pretrain == 0 || *n_test == 0 {
                    return Err(Error::Invalid("n_pretrain and n_test must be >= 1".into()));
                }
            }
            DataConfig::Manifests { .. } => {}
        }
        if self.model.hidden == 0 {
            return Err(Error::Invalid("model.hidden must be >= 1".into()));
        }
        validate_strategies(&self.strategies)?;
        if self.stages.pretrain.epochs == 0 {
            return Err(Error::Invalid("pretraining needs >= 1 epoch".into()));
        }
        for (name, cfg, stage) in [
            ("pretrain", &self.stages.pretrain, Stage::Pretrain),
            ("warmup", &self.stages.warmup, Stage::Warmup),
            ("finetune", &self.stages.finetune, Stage::Finetune),
        ] {
            if cfg.trainable != stage.trainable() {
                return Err(Error::Invalid(format!(
                    "stages.{name}.trainable must be {:?}",
                    stage.trainable()
                )));
            }
            if cfg.epochs > 0 {
                cfg.validate().map_err(|e| e.in_stage(format!("stages.{name}")))?;
            }
        }
        Ok(())
    }

    /// Resolves relative manifest paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataConfig::Manifests { pretrain, one_shot, test } = &mut self.data {
            for p in [pretrain, one_shot, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    fn seed_for(&self, stream: &str) -> u64 {
        mix(&[self.seed, stream_id(stream)])
    }

    fn stage_config(&self, cfg: &TrainConfig, stream: &str) -> TrainConfig {
        TrainConfig {
            seed: mix(&[cfg.seed, self.seed, stream_id(stream)]),
            ..cfg.clone()
        }
    }

    /// Pretraining stage config with its seed derived from the master seed.
    pub fn pretrain_config(&self) -> TrainConfig {
        self.stage_config(&self.stages.pretrain, "pretrain")
    }

    /// Seed of the pretrained model's initialization.
    pub fn init_seed(&self) -> u64 {
        self.seed_for("init")
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            warmup: self.stage_config(&self.stages.warmup, "warmup"),
            finetune: self.stage_config(&self.stages.finetune, "finetune"),
            head_seed: self.seed_for("head"),
            augment_seed: self.seed_for("augment"),
            warmup_includes_real: self.warmup_includes_real,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub pretrain: Vec<Subject>,
    pub one_shot: Subject,
    pub test: Vec<Subject>,
}

impl ExperimentData {
    pub fn from_phantoms(pretrain: Vec<PhantomSample>, one_shot: PhantomSample, test: Vec<PhantomSample>) -> Self {
        Self {
            pretrain: pretrain
                .into_iter()
                .map(|p| Subject {
                    id: p.subject_id,
                    image: p.image,
                    labels: p.existing,
                })
                .collect(),
            one_shot: Subject {
                id: one_shot.subject_id,
                image: one_shot.image,
                labels: one_shot.novel,
            },
            test: test
                .into_iter()
                .map(|p| Subject {
                    id: p.subject_id,
                    image: p.image,
                    labels: p.novel,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.pretrain.first().ok_or(Error::Empty("no pretraining subjects"))?;
        if self.test.is_empty() {
            return Err(Error::Empty("no test subjects"));
        }
        for s in &self.pretrain {
            if s.tracts() != first.tracts() {
                return Err(Error::Invalid(format!("pretraining subject {} has different tracts", s.id)));
            }
        }
        for s in &self.test {
            if s.tracts() != self.one_shot.tracts() {
                return Err(Error::Invalid(format!(
                    "test subject {} tracts {:?} differ from the one-shot tracts {:?}",
                    s.id,
                    s.tracts(),
                    self.one_shot.tracts()
                )));
            }
        }
        let mut ids: Vec<&str> = self.test.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate test subject id".into()));
        }
        Ok(())
    }
}

/// Every entry of a manifest as a [`Subject`].
pub fn load_subjects(path: &Path) -> Result<Vec<Subject>> {
    let m = LoadedManifest::open(path)?;
    m.manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Subject {
                id: e.sample_id.clone(),
                image: m.load_image(e)?,
                labels: m.load_labels(e)?,
            })
        })
        .collect()
}

pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let data = match &config.data {
        DataConfig::Phantom { spec, n_pretrain, n_test } => {
            let spec = PhantomSpec {
                seed: mix(&[spec.seed, config.seed]),
                ..spec.clone()
            };
            let splits = generate_splits(&spec, *n_pretrain, *n_test, config.seed_for("splits"))?;
            ExperimentData::from_phantoms(splits.pretrain, splits.one_shot, splits.test)
        }
        DataConfig::Manifests { pretrain, one_shot, test } => {
            let mut one = load_subjects(one_shot)?;
            if one.len() != 1 {
                return Err(Error::Invalid(format!(
                    "{} must list exactly one scan, found {}",
                    one_shot.display(),
                    one.len()
                )));
            }
            let shot = LoadedManifest::open(one_shot)?;
            if shot.manifest.has_synthetic() {
                return Err(Error::Invalid("the one-shot scan must be real".into()));
            }
            ExperimentData {
                pretrain: load_subjects(pretrain)?,
                one_shot: one.remove(0),
                test: load_subjects(test)?,
            }
        }
    };
    data.validate()?;
    Ok(data)
}

/// Writes `subjects` as `<root>/<id>/image.nii.gz` and
/// `<root>/<id>/labels/<tract>.nii.gz`, plus `<root>/<manifest_name>` with
/// paths relative to `root`.
pub fn write_subjects(subjects: &[Subject], root: &Path, manifest_name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries = par_map(subjects, |s| -> Result<ManifestEntry> {
        let dir = root.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_volume(&s.image, dir.join("image.nii.gz"))?;
        let labels = write_label_map(&s.labels, dir.join("labels"))?;
        Ok(ManifestEntry {
            sample_id: s.id.clone(),
            image: PathBuf::from(&s.id).join("image.nii.gz"),
            labels: labels
                .into_iter()
                .map(|(tract, path)| LabelPath {
                    tract,
                    path: crate::manifest::relative_to(&path, root),
                })
                .collect(),
            provenance: Provenance::Real,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        entries,
        ..Default::default()
    };
    let path = root.join(manifest_name);
    write_manifest(&manifest, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub dice: DiceReport,
}

/// Paired t-test of per-subject mean Dice, `a − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub seed: u64,
    pub existing_tracts: Vec<String>,
    pub novel_tracts: Vec<String>,
    /// Mean Dice of the pretrained model on its own training subjects.
    pub pretrain_dice: f64,
    /// Rows in table order: CFT, IFT, Ours, then one per strategy.
    pub methods: Vec<MethodResult>,
    pub comparisons: Vec<Comparison>,
    pub stages: Vec<StageRecord>,
}

impl ExperimentReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn grand_mean(&self, name: &str) -> Option<f64> {
        self.method(name).map(|m| m.dice.grand_mean)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-tract mean Dice per method, followed by the t-tests.
    pub fn to_table(&self) -> String {
        let width = self.novel_tracts.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<8}", "method");
        for t in &self.novel_tracts {
            out.push_str(&format!(" {t:>width$}"));
        }
        out.push_str(&format!(" {:>width$}\n", "mean"));
        for m in &self.methods {
            out.push_str(&format!("{:<8}", m.method));
            for t in &self.novel_tracts {
                out.push_str(&format!(" {:>width$.3}", m.dice.per_tract_mean[t]));
            }
            out.push_str(&format!(" {:>width$.3}\n", m.dice.grand_mean));
        }
        out.push('\n');
        for c in &self.comparisons {
            out.push_str(&format!(
                "{} vs {}: mean difference {:+.4}, t = {:.3}, df = {}, p = {:.3e}\n",
                c.a, c.b, c.test.mean_difference, c.test.t, c.test.df, c.test.p
            ));
        }
        out
    }
}

struct Predictions {
    subject: usize,
    /// In method order.
    maps: Vec<(String, TractLabelMap)>,
}

/// Runs pretraining, every transfer method and the per-strategy ablations,
/// evaluates on the test subjects and, with `out_dir`, writes checkpoints,
/// predictions, manifests and the report.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    config.validate()?;
    let data = load_data(config).map_err(|e| e.in_stage("data"))?;
    run_experiment_on(config, &data, out_dir)
}

pub fn run_experiment_on(
    config: &ExperimentConfig,
    data: &ExperimentData,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    config.validate()?;
    data.validate()?;
    log::info!(
        "experiment seed {}: {} pretraining, 1 one-shot, {} test subjects",
        config.seed,
        data.pretrain.len(),
        data.test.len()
    );
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if config.outputs.write_data && matches!(config.data, DataConfig::Phantom { .. }) {
            let root = dir.join("data");
            write_subjects(&data.pretrain, &root.join("pretrain"), "manifest.json")?;
            write_subjects(std::slice::from_ref(&data.one_shot), &root.join("one_shot"), "manifest.json")?;
            write_subjects(&data.test, &root.join("test"), "manifest.json")?;
        }
    }

    let (model_e, pre_record) = pretrain(&data.pretrain, config.model.hidden, config.init_seed(), &config.pretrain_config())?;
    let pretrain_dice = {
        let scores = par_map(&data.pretrain, |s| -> Result<f64> { mean_dice(&model_e.predict(&s.image)?, &s.labels) })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    log::info!("pretrain: mean training-set Dice {pretrain_dice:.3}");

    let adapt = config.adapt_config();
    let cft = adapt_cft(&model_e, &data.one_shot, &adapt)?;
    let ift = adapt_ift(&model_e, &data.one_shot, &adapt)?;
    let ours = adapt_ours(&model_e, &data.one_shot, &config.strategies, &adapt)?;

    let novel = data.one_shot.tracts();
    let subjects: Vec<String> = data.test.iter().map(|s| s.id.clone()).collect();
    let indices: Vec<usize> = (0..data.test.len()).collect();
    let predictions = par_map(&indices, |&i| -> Result<Predictions> {
        let s = &data.test[i];
        let f = extract_features(&s.image);
        let g = s.image.geometry();
        let cft_p = cft.model.predict_features(&f, g)?;
        let ift_p = ift.model.predict_features(&f, g)?;
        let per: Vec<TractLabelMap> = ours
            .iter()
            .map(|a| a.model.predict_features(&f, g))
            .collect::<Result<_>>()?;
        let mut maps = vec![
            ("CFT".to_string(), cft_p),
            ("IFT".to_string(), ift_p),
            ("Ours".to_string(), majority_vote(&per)?),
        ];
        maps.extend(ours.iter().map(|a| a.method.clone()).zip(per));
        Ok(Predictions { subject: i, maps })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .map_err(|e| e.in_stage("evaluate"))?;

    log::info!("evaluated {} methods on {} test subjects", predictions[0].maps.len(), subjects.len());
    let method_names: Vec<String> = predictions[0].maps.iter().map(|(m, _)| m.clone()).collect();
    let mut methods = Vec::with_capacity(method_names.len());
    for (k, name) in method_names.iter().enumerate() {
        let mut scores = Vec::with_capacity(novel.len() * subjects.len());
        for p in &predictions {
            let truth = &data.test[p.subject].labels;
            let pred = &p.maps[k].1;
            for (c, t) in pred.channels().iter().zip(truth.channels()) {
                scores.push((c.name.clone(), subjects[p.subject].clone(), dice(&c.mask, &t.mask)?));
            }
        }
        methods.push(MethodResult {
            method: name.clone(),
            dice: aggregate(&novel, &subjects, &scores)?,
        });
    }

    let per_subject = |name: &str| {
        methods
            .iter()
            .find(|m| m.method == name)
            .expect("method evaluated")
            .dice
            .per_subject_mean()
    };
    let mut comparisons = Vec::new();
    if subjects.len() >= 2 {
        for (a, b) in [("Ours", "CFT"), ("Ours", "IFT"), ("IFT", "CFT")] {
            comparisons.push(Comparison {
                a: a.into(),
                b: b.into(),
                test: paired_t_test(&per_subject(a), &per_subject(b))?,
            });
        }
    }

    let mut stages = vec![pre_record];
    stages.extend(cft.stages.iter().cloned());
    stages.extend(ift.stages.iter().cloned());
    for a in &ours {
        stages.extend(a.stages.iter().cloned());
    }

    let report = ExperimentReport {
        format_version: REPORT_VERSION,
        seed: config.seed,
        existing_tracts: model_e.tracts.clone(),
        novel_tracts: novel,
        pretrain_dice,
        methods,
        comparisons,
        stages,
    };

    if let Some(dir) = out_dir {
        if config.outputs.write_checkpoints {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
            model_e.save(ck.join("pretrained.json"))?;
            for a in [&cft, &ift].into_iter().chain(&ours) {
                a.model.save(ck.join(format!("{}.json", a.method.to_ascii_lowercase())))?;
            }
        }
        if config.outputs.write_predictions {
            let root = dir.join("predictions");
            for p in &predictions {
                for (method, map) in &p.maps {
                    write_label_map(map, root.join(method).join(&subjects[p.subject]))?;
                }
            }
        }
        let json = dir.join("report.json");
        fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(report)
}

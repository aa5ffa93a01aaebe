use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use tractaug_core::augment::{generate_dataset, AugmentationPlan};
use tractaug_core::ensemble::majority_vote;
use tractaug_core::manifest::{write_manifest, DatasetManifest, LabelPath, LoadedManifest, ManifestEntry, Provenance};
use tractaug_core::metrics::dice;
use tractaug_core::model::SegmenterModel;
use tractaug_core::nifti::{read_label_map, read_volume, write_label_map, write_volume};
use tractaug_core::phantom::PhantomSpec;
use tractaug_core::pipeline::{
    adapt, load_data, load_subjects, predict_ensemble, pretrain, run_experiment, write_subjects, AdaptationStrategy,
    DataConfig, ExperimentConfig, StageConfigs, Subject,
};
use tractaug_core::model::TrainConfig;
use tractaug_core::TractLabelMap;

use crate::{
    AdaptArgs, AugmentArgs, Cli, CliError, Command, DiceArgs, EnsembleArgs, ExperimentCommand, MethodArg, PhantomArgs,
    PredictArgs, SampleInput, TrainPretrainArgs,
};

type CmdResult<T = ()> = Result<T, CliError>;

pub fn dispatch(cli: &Cli) -> CmdResult {
    let out = &cli.global.output_dir;
    match &cli.command {
        Command::Phantom(a) => phantom(cli, a, out),
        Command::Augment(a) => augment(cli, a, out),
        Command::TrainPretrain(a) => train_pretrain(cli, a, out),
        Command::Adapt(a) => adapt_cmd(cli, a, out),
        Command::Predict(a) => predict(cli, a, out),
        Command::Ensemble(a) => ensemble(cli, a, out),
        Command::Dice(a) => dice_cmd(cli, a, out),
        Command::Experiment(ExperimentCommand::Run { config }) => experiment(cli, config.as_deref(), out),
        Command::Experiment(ExperimentCommand::DefaultConfig) => {
            println!("{}", pretty(&ExperimentConfig::default()));
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: crate::EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Writes `run.json`: the subcommand and its resolved configuration.
fn run_manifest(cli: &Cli, out: &Path, command: &str, config: Value) -> CmdResult {
    create_dir(out)?;
    let record = json!({
        "tool": "tractaug",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cli.global.seed.unwrap_or(0),
        "threads": cli.global.threads,
        "config": config,
    });
    log::info!("{command}: resolved config {}", record["config"]);
    let mut text = pretty(&record);
    text.push('\n');
    write_text(&out.join("run.json"), &text)
}

fn seed(cli: &Cli) -> u64 {
    cli.global.seed.unwrap_or(0)
}

fn phantom(cli: &Cli, a: &PhantomArgs, out: &Path) -> CmdResult {
    let spec: PhantomSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    let config = ExperimentConfig {
        data: DataConfig::Phantom {
            spec,
            n_pretrain: a.n_pretrain,
            n_test: a.n_test,
        },
        seed: seed(cli),
        ..Default::default()
    };
    run_manifest(cli, out, "phantom", json!({ "data": config.data }))?;
    config.validate()?;
    let data = load_data(&config)?;
    for (name, subjects) in [
        ("pretrain", &data.pretrain[..]),
        ("one_shot", std::slice::from_ref(&data.one_shot)),
        ("test", &data.test[..]),
    ] {
        let path = write_subjects(subjects, &out.join(name), "manifest.json")?;
        println!("{name}: {} subjects -> {}", subjects.len(), path.display());
    }
    Ok(())
}

fn parse_labels(specs: &[String]) -> CmdResult<Vec<(String, PathBuf)>> {
    specs
        .iter()
        .map(|s| match s.split_once('=') {
            Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
            _ => Err(CliError::usage(format!("--label expects NAME=PATH, got {s:?}"))),
        })
        .collect()
}

fn load_sample(input: &SampleInput) -> CmdResult<Subject> {
    if let Some(m) = &input.manifest {
        let loaded = LoadedManifest::open(m)?;
        let entry = match &input.sample {
            Some(id) => loaded
                .entry(id)
                .ok_or_else(|| CliError::invalid(format!("{}: no entry {id:?}", m.display())))?,
            None => loaded
                .manifest
                .entries
                .first()
                .ok_or_else(|| CliError::invalid(format!("{}: manifest is empty", m.display())))?,
        };
        return Ok(Subject {
            id: entry.sample_id.clone(),
            image: loaded.load_image(entry)?,
            labels: loaded.load_labels(entry)?,
        });
    }
    let image = input
        .image
        .as_ref()
        .ok_or_else(|| CliError::usage("give either --manifest or --image with --label"))?;
    let labels = read_label_map(&parse_labels(&input.label)?)?;
    let id = image
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_else(|| "sample".into());
    Ok(Subject {
        id,
        image: read_volume(image)?,
        labels,
    })
}

fn augment(cli: &Cli, a: &AugmentArgs, out: &Path) -> CmdResult {
    let sample = load_sample(&a.input)?;
    let augment_seed = ExperimentConfig {
        seed: seed(cli),
        ..Default::default()
    }
    .adapt_config()
    .augment_seed;
    let mut plan = AugmentationPlan::for_labels(a.strategy, &sample.labels, augment_seed);
    if let Some(c) = a.count {
        plan.count = c;
    }
    run_manifest(
        cli,
        out,
        "augment",
        json!({
            "input": {"manifest": a.input.manifest, "sample": a.input.sample, "image": a.input.image, "label": a.input.label},
            "sample_id": sample.id,
            "tracts": sample.tracts(),
            "plan": plan,
        }),
    )?;
    let synthetic = generate_dataset(&sample.image, &sample.labels, &plan)?;
    let mut entries = Vec::with_capacity(synthetic.len());
    for s in &synthetic {
        let id = format!("{}-{}-{:03}", sample.id, a.strategy.name(), s.index);
        let dir = out.join(&id);
        create_dir(&dir)?;
        write_volume(&s.image, dir.join("image.nii.gz"))?;
        let labels = write_label_map(&s.labels, dir.join("labels"))?;
        entries.push(ManifestEntry {
            sample_id: id.clone(),
            image: PathBuf::from(&id).join("image.nii.gz"),
            labels: labels
                .into_iter()
                .map(|(tract, path)| LabelPath {
                    tract,
                    path: tractaug_core::manifest::relative_to(&path, out),
                })
                .collect(),
            provenance: Provenance::Synthetic {
                strategy: a.strategy,
                seed: s.seed,
                sample_index: s.index,
            },
        });
    }
    let manifest = DatasetManifest {
        entries,
        ..Default::default()
    };
    write_manifest(&manifest, out.join("manifest.json"))?;
    println!("{}: wrote {} synthetic scans to {}", a.strategy, synthetic.len(), out.display());
    Ok(())
}

fn train_pretrain(cli: &Cli, a: &TrainPretrainArgs, out: &Path) -> CmdResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => StageConfigs::default().pretrain,
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut exp = ExperimentConfig {
        seed: seed(cli),
        ..Default::default()
    };
    exp.stages.pretrain = cfg;
    exp.model.hidden = a.hidden;
    exp.validate()?;
    run_manifest(
        cli,
        out,
        "train-pretrain",
        json!({ "manifest": a.manifest, "hidden": a.hidden, "train": exp.stages.pretrain }),
    )?;
    let subjects = load_subjects(&a.manifest)?;
    let (model, record) = pretrain(&subjects, a.hidden, exp.init_seed(), &exp.pretrain_config())?;
    model.save(out.join("pretrained.json"))?;
    write_text(&out.join("stages.json"), &(pretty(&[record]) + "\n"))?;
    println!("pretrained {} tracts -> {}", model.n_outputs(), out.join("pretrained.json").display());
    Ok(())
}

fn adapt_cmd(cli: &Cli, a: &AdaptArgs, out: &Path) -> CmdResult {
    let stages: StageConfigs = match &a.config {
        Some(p) => read_json(p)?,
        None => StageConfigs::default(),
    };
    let method = match a.method {
        MethodArg::Cft => AdaptationStrategy::Cft,
        MethodArg::Ift => AdaptationStrategy::Ift,
        MethodArg::Ours => AdaptationStrategy::Ours {
            strategies: a.strategies.clone(),
        },
    };
    let exp = ExperimentConfig {
        seed: seed(cli),
        stages,
        warmup_includes_real: !a.synthetic_only_warmup,
        strategies: match &method {
            AdaptationStrategy::Ours { strategies } => strategies.clone(),
            _ => ExperimentConfig::default().strategies,
        },
        ..Default::default()
    };
    exp.validate()?;
    let adapt_cfg = exp.adapt_config();
    run_manifest(
        cli,
        out,
        "adapt",
        json!({ "checkpoint": a.checkpoint, "manifest": a.manifest, "method": method, "adapt": adapt_cfg }),
    )?;
    let model_e = SegmenterModel::load(&a.checkpoint)?;
    let mut subjects = load_subjects(&a.manifest)?;
    if subjects.len() != 1 {
        return Err(CliError::invalid(format!(
            "{} must hold exactly one annotated scan, found {}",
            a.manifest.display(),
            subjects.len()
        )));
    }
    let one_shot = subjects.remove(0);
    let adapted = adapt(&model_e, &one_shot, &method, &adapt_cfg)?;
    let mut records = Vec::new();
    for m in &adapted {
        let path = out.join(format!("{}.json", m.method.to_ascii_lowercase()));
        m.model.save(&path)?;
        println!("{} -> {}", m.method, path.display());
        records.extend(m.stages.iter().cloned());
    }
    write_text(&out.join("stages.json"), &(pretty(&records) + "\n"))
}

fn predict(cli: &Cli, a: &PredictArgs, out: &Path) -> CmdResult {
    run_manifest(cli, out, "predict", json!({ "checkpoint": a.checkpoint, "image": a.image }))?;
    let models = a
        .checkpoint
        .iter()
        .map(SegmenterModel::load)
        .collect::<Result<Vec<_>, _>>()?;
    if models.iter().any(|m| m.tracts != models[0].tracts) {
        return Err(CliError::invalid("checkpoints segment different tracts"));
    }
    let image = read_volume(&a.image)?;
    let labels = if models.len() == 1 {
        models[0].predict(&image)?
    } else {
        predict_ensemble(&models, &image)?
    };
    let dir = out.join("prediction");
    write_label_map(&labels, &dir)?;
    println!("{} tracts -> {}", labels.len(), dir.display());
    Ok(())
}

/// Reads every `<tract>.nii.gz` in `dir`, in file-name order.
fn read_label_dir(dir: &Path, names: Option<&[String]>) -> CmdResult<TractLabelMap> {
    let names: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => {
            let mut found: Vec<String> = fs::read_dir(dir)
                .map_err(|e| io_err(dir, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".nii.gz")).map(String::from))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(CliError::invalid(format!("{}: no .nii.gz label files", dir.display())));
            }
            found
        }
    };
    let pairs: Vec<(String, PathBuf)> = names
        .iter()
        .map(|n| (n.clone(), dir.join(tractaug_core::nifti::label_file_name(n))))
        .collect();
    Ok(read_label_map(&pairs)?)
}

fn ensemble(cli: &Cli, a: &EnsembleArgs, out: &Path) -> CmdResult {
    run_manifest(cli, out, "ensemble", json!({ "prediction": a.prediction }))?;
    let first = read_label_dir(&a.prediction[0], None)?;
    let names: Vec<String> = first.names().map(String::from).collect();
    let mut maps = vec![first];
    for dir in &a.prediction[1..] {
        maps.push(read_label_dir(dir, Some(&names))?);
    }
    let voted = majority_vote(&maps)?;
    let dir = out.join("ensemble");
    write_label_map(&voted, &dir)?;
    println!("voted {} predictions over {} tracts -> {}", maps.len(), names.len(), dir.display());
    Ok(())
}

fn dice_cmd(cli: &Cli, a: &DiceArgs, out: &Path) -> CmdResult {
    run_manifest(cli, out, "dice", json!({ "prediction": a.prediction, "truth": a.truth }))?;
    let truth = read_label_dir(&a.truth, None)?;
    let names: Vec<String> = truth.names().map(String::from).collect();
    let pred = read_label_dir(&a.prediction, Some(&names))?;
    let mut per_tract = serde_json::Map::new();
    let mut total = 0.0;
    for (p, t) in pred.channels().iter().zip(truth.channels()) {
        let d = dice(&p.mask, &t.mask)?;
        println!("{:<16} {d:.4}", t.name);
        per_tract.insert(t.name.clone(), json!(d));
        total += d;
    }
    let mean = total / names.len() as f64;
    println!("{:<16} {mean:.4}", "mean");
    let report = json!({ "per_tract": per_tract, "mean": mean });
    write_text(&out.join("dice.json"), &(pretty(&report) + "\n"))
}

fn experiment(cli: &Cli, config_path: Option<&Path>, out: &Path) -> CmdResult {
    let mut config: ExperimentConfig = match config_path {
        Some(p) => {
            let mut c: ExperimentConfig = read_json(p)?;
            c.resolve_paths(p.parent().unwrap_or(Path::new(".")));
            c
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        config.seed = s;
    }
    config.validate()?;
    run_manifest(cli, out, "experiment run", serde_json::to_value(&config).expect("config serializes"))?;
    let report = run_experiment(&config, Some(out))?;
    print!("{}", report.to_table());
    Ok(())
}

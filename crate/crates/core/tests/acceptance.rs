//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! The end-to-end criteria train the default experiment for 20 seeds and
//! take a few minutes.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use tractaug_core::augment::{
    box_to_mask, generate_dataset, sample_lambda, subset_to_mask, AugmentationPlan, MaskProvenance, Strategy,
    TractSubset,
};
use tractaug_core::ensemble::majority_vote;
use tractaug_core::metrics::{dice, paired_t_test};
use tractaug_core::model::features::{FeatureArray, N_FEATURES};
use tractaug_core::model::{SegmenterModel, TrainConfig, Trainable};
use tractaug_core::phantom::{generate_phantom, PhantomSpec};
use tractaug_core::pipeline::{
    adapt_ift, adapt_ours, run_experiment, AdaptConfig, ExperimentConfig, ExperimentReport, Subject,
};
use tractaug_core::rng::{rng_from, Rng64};
use tractaug_core::volume::{content_hash_of, voxelwise_mask_apply};
use tractaug_core::{BinaryMask3D, Geometry, TractLabelMap, Volume3D};

type Outcome = Result<String, Box<dyn std::error::Error>>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_geometry(rng: &mut Rng64, max: usize) -> Geometry {
    let dims = [0; 3].map(|_| rng.random_range(1..=max));
    Geometry::new(dims, [1.0; 3]).unwrap()
}

fn random_volume(g: &Geometry, rng: &mut Rng64) -> Volume3D {
    Volume3D::from_vec(g.clone(), (0..g.len()).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

fn random_mask(g: &Geometry, p: f64, rng: &mut Rng64) -> BinaryMask3D {
    BinaryMask3D::from_vec(g.clone(), (0..g.len()).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn random_labels(g: &Geometry, n: usize, rng: &mut Rng64) -> TractLabelMap {
    TractLabelMap::from_pairs((0..n).map(|j| (format!("T{j}"), random_mask(g, 0.3, rng)))).unwrap()
}

fn c1_cutout_oracle() -> Outcome {
    let mut rng = rng_from(1);
    for case in 0..100 {
        let g = random_geometry(&mut rng, 16);
        let x = random_volume(&g, &mut rng);
        let p = rng.random_range(0.0..1.0);
        let m = random_mask(&g, p, &mut rng);
        let out = voxelwise_mask_apply(&x, &m)?;
        let [nx, ny, nz] = g.dims();
        for z in 0..nz {
            for y in 0..ny {
                for xi in 0..nx {
                    let want = if m.get(xi, y, z) { 0.0f32 } else { x.get(xi, y, z) };
                    check(out.get(xi, y, z).to_bits() == want.to_bits(), || {
                        format!("case {case}: voxel ({xi},{y},{z}) differs")
                    })?;
                }
            }
        }
    }
    Ok("100 random volumes match the triple-loop reference bit for bit".into())
}

fn c2_box_statistics() -> Outcome {
    let mut rng = rng_from(2);
    let n = 100_000;
    let (mut mean_l, mut mean_v) = (0.0, 0.0);
    for _ in 0..n {
        let l = sample_lambda(&mut rng);
        check((0.0..1.0).contains(&l), || format!("lambda {l} outside [0, 1)"))?;
        mean_l += l;
        mean_v += (1.0 - l).powf(1.5);
    }
    mean_l /= n as f64;
    mean_v /= n as f64;
    check((mean_l - 0.5).abs() <= 0.01, || format!("mean lambda {mean_l:.4}"))?;
    check((mean_v - 0.4).abs() <= 0.01, || format!("mean (1-lambda)^1.5 {mean_v:.4}"))?;
    Ok(format!("mean lambda {mean_l:.4}, mean (1-lambda)^1.5 {mean_v:.4}"))
}

fn c3_ceiling_equivalence() -> Outcome {
    let mut rng = rng_from(3);
    for case in 0..1000 {
        let g = random_geometry(&mut rng, 8);
        let n = rng.random_range(1..=6);
        let labels = random_labels(&g, n, &mut rng);
        let code = rng.random_range(1..(1u64 << n));
        let subset = TractSubset::from_code(n, code)?;
        let got = subset_to_mask(&labels, &subset)?;
        for v in 0..g.len() {
            let sum: f64 = (0..n)
                .filter(|&j| subset.bits()[j])
                .map(|j| labels.mask(j).data()[v] as u8 as f64)
                .sum();
            let ceil = (sum / n as f64).ceil();
            check((ceil == 1.0) == got.data()[v], || format!("case {case}: voxel {v}"))?;
        }
    }
    Ok("1000 random (labels, subset) pairs agree voxelwise".into())
}

/// `n` disjoint non-empty tracts on a positive image, so every mask choice
/// changes the image.
fn disjoint_sample(n: usize, rng: &mut Rng64) -> (Volume3D, TractLabelMap) {
    let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
    let x = Volume3D::from_vec(g.clone(), (0..g.len()).map(|_| rng.random_range(0.5f32..1.5)).collect()).unwrap();
    let labels = TractLabelMap::from_pairs((0..n).map(|j| {
        let data = (0..g.len()).map(|v| v % (n + 1) == j).collect();
        (format!("T{j}"), BinaryMask3D::from_vec(g.clone(), data).unwrap())
    }))
    .unwrap();
    (x, labels)
}

fn c4_count_and_dedup() -> Outcome {
    let mut rng = rng_from(4);
    let mut counts = Vec::new();
    for n in [1usize, 2, 3, 7, 12] {
        let (x, y) = disjoint_sample(n, &mut rng);
        let want = ((1usize << n) - 1).min(100);
        for s in Strategy::ALL {
            let out = generate_dataset(&x, &y, &AugmentationPlan::new(s, n, 11))?;
            check(out.len() == want, || format!("{s} N={n}: {} samples, want {want}", out.len()))?;
            let hashes: HashSet<u64> = out.iter().map(|o| o.content_hash()).collect();
            check(hashes.len() == want, || format!("{s} N={n}: duplicate hashes"))?;
            for i in 0..out.len() {
                for j in 0..i {
                    check(out[i].image != out[j].image || out[i].labels != out[j].labels, || {
                        format!("{s} N={n}: samples {j} and {i} are equal")
                    })?;
                }
                check(out[i].content_hash() != content_hash_of(&[&x, &y]), || {
                    format!("{s} N={n}: sample {i} equals the source")
                })?;
            }
            if n == 3 && !s.uses_box() {
                let codes: HashSet<u64> = out
                    .iter()
                    .map(|o| match &o.provenance {
                        MaskProvenance::Subset(t) => t.code(),
                        MaskProvenance::Box(_) => 0,
                    })
                    .collect();
                check(codes == (1..8).collect(), || format!("{s}: subsets {codes:?}"))?;
            }
        }
        counts.push(format!("N={n}:{want}"));
    }
    Ok(format!("counts {} for all four strategies, all distinct", counts.join(" ")))
}

fn c5_label_rules() -> Outcome {
    let mut rng = rng_from(5);
    let mut checked = 0;
    for _ in 0..20 {
        let g = random_geometry(&mut rng, 10);
        let n = rng.random_range(1..=4);
        let x = random_volume(&g, &mut rng);
        let y = random_labels(&g, n, &mut rng);
        for s in Strategy::ALL {
            let plan = AugmentationPlan {
                count: 1,
                ..AugmentationPlan::new(s, n, rng.random())
            };
            let sample = match generate_dataset(&x, &y, &plan) {
                Ok(mut v) => v.remove(0),
                // a volume or label set this small may admit no distinct sample
                Err(_) => continue,
            };
            let m = match &sample.provenance {
                MaskProvenance::Box(b) => box_to_mask(b, &g)?,
                MaskProvenance::Subset(t) => {
                    let data = (0..g.len())
                        .map(|v| (0..n).any(|j| t.bits()[j] && y.mask(j).data()[v]))
                        .collect();
                    BinaryMask3D::from_vec(g.clone(), data)?
                }
            };
            for j in 0..n {
                let got = sample.labels.mask(j).data();
                let orig = y.mask(j).data();
                for v in 0..g.len() {
                    let want = if s.masks_labels() { orig[v] && !m.data()[v] } else { orig[v] };
                    check(got[v] == want, || format!("{s}: tract {j} voxel {v}"))?;
                }
            }
            for v in 0..g.len() {
                let want = if m.data()[v] { 0.0f32 } else { x.data()[v] };
                check(sample.image.data()[v].to_bits() == want.to_bits(), || format!("{s}: image voxel {v}"))?;
            }
            checked += 1;
        }
    }
    check(checked >= 60, || format!("only {checked} samples checked"))?;
    Ok(format!("{checked} random samples: RC2/TC2 keep Y, RC1/TC1 give Y*(1-M)"))
}

fn c6_vote_table() -> Outcome {
    let g = Geometry::new([16, 1, 1], [1.0; 3]).unwrap();
    let preds: Vec<TractLabelMap> = (0..4)
        .map(|k| {
            let m = BinaryMask3D::from_vec(g.clone(), (0..16).map(|case| case >> k & 1 == 1).collect()).unwrap();
            TractLabelMap::from_pairs([("T", m)]).unwrap()
        })
        .collect();
    let voted = majority_vote(&preds)?;
    for case in 0..16u32 {
        let want = case.count_ones() >= 2;
        check(voted.mask(0).data()[case as usize] == want, || format!("case {case:04b}"))?;
    }
    let mut rng = rng_from(6);
    let g = Geometry::new([6, 5, 4], [1.0; 3]).unwrap();
    let mut maps: Vec<TractLabelMap> = (0..5).map(|_| random_labels(&g, 3, &mut rng)).collect();
    let reference = majority_vote(&maps)?;
    for _ in 0..100 {
        maps.shuffle(&mut rng);
        check(majority_vote(&maps)? == reference, || "vote depends on model order".into())?;
    }
    Ok("16-case K=4 table with ties to 1; invariant under 100 shuffles".into())
}

/// Two-sided p of Student's t with integer `df`, from the finite series in
/// `cos θ`, `θ = atan(|t| / √df)`.
fn t_two_sided_p_oracle(t: f64, df: usize) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let a = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 1;
            while 2 * k + 1 < df {
                term *= c * c * (2 * k) as f64 / (2 * k + 1) as f64;
                sum += term;
                k += 1;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1;
        while 2 * k < df {
            term *= c * c * (2 * k - 1) as f64 / (2 * k) as f64;
            sum += term;
            k += 1;
        }
        s * sum
    };
    1.0 - a
}

fn c7_metrics() -> Outcome {
    let g = Geometry::new([4, 2, 1], [1.0; 3]).unwrap();
    let mask = |bits: [u8; 8]| BinaryMask3D::from_vec(g.clone(), bits.iter().map(|&b| b == 1).collect()).unwrap();
    let a = mask([1, 1, 1, 1, 0, 0, 0, 0]);
    let b = mask([0, 0, 1, 1, 1, 1, 0, 0]);
    let c = mask([0, 0, 0, 0, 1, 1, 1, 1]);
    check(dice(&a, &a)? == 1.0, || "equal masks".into())?;
    check(dice(&a, &c)? == 0.0, || "disjoint masks".into())?;
    check(dice(&a, &b)? == 0.5, || "4/4/2 construction".into())?;

    let mut rng = rng_from(7);
    let mut worst: f64 = 0.0;
    for n in [3usize, 10, 30] {
        for _ in 0..20 {
            let shift = rng.random_range(-0.5..0.5);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + shift + rng.random_range(-0.5..0.5)).collect();
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = mean / (var / n as f64).sqrt();
            let want = t_two_sided_p_oracle(t, n - 1);
            let got = paired_t_test(&x, &y)?;
            check(got.df == n - 1, || format!("df {} for n={n}", got.df))?;
            let err = (got.p - want).abs();
            worst = worst.max(err);
            check(err < 1e-6, || format!("n={n} t={t:.4}: p {} vs oracle {want}", got.p))?;
        }
    }
    Ok(format!("Dice identities hold; t-test p within {worst:.1e} of the closed-form oracle"))
}

fn c8_gradient_check() -> Outcome {
    let mut rng = rng_from(8);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let tracts: Vec<String> = (0..rng.random_range(1..=3)).map(|j| format!("T{j}")).collect();
        let hidden = rng.random_range(2..=6);
        let mut model = SegmenterModel::new(tracts.clone(), hidden, rng.random())?;
        for b in model.feature_layer.bias.iter_mut().chain(model.head.bias.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        let n = 5;
        let features = FeatureArray::from_rows((0..n * N_FEATURES).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        let labels: Vec<f32> = (0..n * tracts.len()).map(|_| rng.random_range(0..2) as f32).collect();
        let (_, grads) = model.loss_and_gradients(&features, &labels, false);

        for layer in 0..2 {
            let n_w = [&model.feature_layer, &model.head][layer].weights.len();
            let n_b = [&model.feature_layer, &model.head][layer].bias.len();
            for p in 0..n_w + n_b {
                let analytic = {
                    let gl = if layer == 0 { &grads.feature_layer } else { &grads.head };
                    if p < n_w { gl.weights[p] } else { gl.bias[p - n_w] }
                };
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    let l = if layer == 0 { &mut m.feature_layer } else { &mut m.head };
                    if p < n_w {
                        l.weights[p] += delta;
                    } else {
                        l.bias[p - n_w] += delta;
                    }
                    m.loss(&features, &labels)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                check(rel < 1e-4, || {
                    format!("model {case} layer {layer} param {p}: analytic {analytic} numeric {numeric}")
                })?;
            }
        }
    }
    Ok(format!("20 random models, max relative error {worst:.2e}"))
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn c9_warmup_freeze() -> Outcome {
    let spec = PhantomSpec {
        dims: [20; 3],
        ..PhantomSpec::default()
    };
    let p = generate_phantom(&spec, 9)?;
    let one_shot = Subject {
        id: p.subject_id.clone(),
        image: p.image,
        labels: p.novel,
    };
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("pretrained.json");
    SegmenterModel::new(p.existing.names().map(String::from).collect(), 8, 9)?.save(&path)?;
    let model_e = SegmenterModel::load(&path)?;

    let stage = TrainConfig {
        epochs: 3,
        batch_size: 64,
        voxels_per_sample: 512,
        trainable: Trainable::HeadOnly,
        ..TrainConfig::default()
    };
    let cfg = AdaptConfig {
        warmup: stage.clone(),
        finetune: TrainConfig { epochs: 0, ..stage },
        head_seed: 3,
        augment_seed: 4,
        warmup_includes_real: true,
    };
    let fresh = SegmenterModel::transfer(&model_e, one_shot.tracts(), cfg.head_seed)?;
    let mut adapted = vec![adapt_ift(&model_e, &one_shot, &cfg)?];
    adapted.extend(adapt_ours(&model_e, &one_shot, &Strategy::ALL, &cfg)?);
    for a in &adapted {
        let warm = &a.stages[0];
        check(warm.report.as_ref().is_some_and(|r| r.steps > 0), || format!("{}: warmup did not run", a.method))?;
        check(
            same_bits(&a.model.feature_layer.weights, &model_e.feature_layer.weights)
                && same_bits(&a.model.feature_layer.bias, &model_e.feature_layer.bias),
            || format!("{}: feature layer changed during warmup", a.method),
        )?;
        check(a.model.head != fresh.head, || format!("{}: head did not train", a.method))?;
    }
    let names: Vec<&str> = adapted.iter().map(|a| a.method.as_str()).collect();
    Ok(format!("feature layer bit-identical after head-only warmup in {}", names.join(", ")))
}

const SEEDS: u64 = 20;

fn experiment(seed: u64) -> ExperimentReport {
    let config = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    run_experiment(&config, None).expect("experiment runs")
}

fn c10_ordering(reports: &mut Vec<ExperimentReport>) -> Outcome {
    for seed in 0..SEEDS {
        let t0 = Instant::now();
        let r = experiment(seed);
        eprintln!(
            "  seed {seed:2} ({:4.1}s): CFT {:.3} IFT {:.3} Ours {:.3}",
            t0.elapsed().as_secs_f64(),
            r.grand_mean("CFT").unwrap(),
            r.grand_mean("IFT").unwrap(),
            r.grand_mean("Ours").unwrap()
        );
        reports.push(r);
    }
    let means = |m: &str| -> Vec<f64> { reports.iter().map(|r| r.grand_mean(m).unwrap()).collect() };
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (cft, ift, ours) = (means("CFT"), means("IFT"), means("Ours"));
    let ours_ift = paired_t_test(&ours, &ift)?;
    let ift_cft = paired_t_test(&ift, &cft)?;
    let mut line = format!(
        "{SEEDS} seeds: CFT {:.3} < IFT {:.3} < Ours {:.3}; p(Ours,IFT) {:.1e}, p(IFT,CFT) {:.1e}",
        avg(&cft),
        avg(&ift),
        avg(&ours),
        ours_ift.p,
        ift_cft.p
    );
    check(avg(&ours) > avg(&ift) && ours_ift.mean_difference > 0.0 && ours_ift.p < 0.05, || {
        format!("Ours vs IFT fails: {line}")
    })?;
    check(avg(&ift) > avg(&cft) && ift_cft.mean_difference > 0.0 && ift_cft.p < 0.05, || {
        format!("IFT vs CFT fails: {line}")
    })?;
    for s in Strategy::ALL {
        let m = avg(&means(s.name()));
        line += &format!("; {s} {m:.3}");
        check(m > avg(&ift), || format!("{s} {m:.3} does not exceed IFT {:.3}", avg(&ift)))?;
    }
    Ok(line)
}

fn c11_determinism(reference: Option<&ExperimentReport>) -> Outcome {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("pool")
            .install(|| experiment(0).to_json())
    };
    let one = run(1);
    let four = run(4);
    check(one == four, || "report JSON differs between 1 and 4 threads".into())?;
    if let Some(r) = reference {
        check(r.to_json() == one, || "rerun differs from the first run".into())?;
    }
    Ok(format!("seed 0 report ({} bytes) identical with 1 and 4 threads and on rerun", one.len()))
}

fn run(id: usize, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
            .into())
    });
    let elapsed = t0.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs()).into()),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.clone()),
        Err(e) => ("FAIL", e.to_string()),
    };
    println!("criterion {id:2}: {tag}  {detail} [{:.2}s]", elapsed.as_secs_f64());
    outcome.is_ok()
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut ok = true;
    ok &= run(1, secs(5), c1_cutout_oracle);
    ok &= run(2, secs(5), c2_box_statistics);
    ok &= run(3, secs(10), c3_ceiling_equivalence);
    ok &= run(4, secs(30), c4_count_and_dedup);
    ok &= run(5, secs(10), c5_label_rules);
    ok &= run(6, secs(1), c6_vote_table);
    ok &= run(7, secs(5), c7_metrics);
    ok &= run(8, secs(10), c8_gradient_check);
    ok &= run(9, secs(30), c9_warmup_freeze);
    let mut reports = Vec::new();
    ok &= run(10, secs(15 * 60), || c10_ordering(&mut reports));
    ok &= run(11, None, || c11_determinism(reports.first()));
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}

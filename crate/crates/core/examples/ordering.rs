//! Runs the phantom experiment for several master seeds and prints the mean
//! test Dice of every method.
//!
//! ```text
//! cargo run --release --example ordering -- [n_seeds] [config.json]
//! ```

use std::time::Instant;

use tractaug_core::metrics::paired_t_test;
use tractaug_core::pipeline::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).format_timestamp_millis().init();
    let mut args = std::env::args().skip(1);
    let n: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let base: ExperimentConfig = match args.next() {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for seed in 0..n {
        let t0 = Instant::now();
        let report = run_experiment(&ExperimentConfig { seed, ..base.clone() }, None)?;
        print!("seed {seed:>3} ({:5.1}s) pre {:.3}", t0.elapsed().as_secs_f64(), report.pretrain_dice);
        for m in &report.methods {
            print!("  {} {:.3}", m.method, m.dice.grand_mean);
            match rows.iter_mut().find(|(name, _)| *name == m.method) {
                Some((_, v)) => v.push(m.dice.grand_mean),
                None => rows.push((m.method.clone(), vec![m.dice.grand_mean])),
            }
        }
        println!();
    }
    for (name, v) in &rows {
        println!("{name:<5} {:.4}", v.iter().sum::<f64>() / v.len() as f64);
    }
    if n >= 2 {
        let get = |name: &str| rows.iter().find(|(m, _)| m == name).map(|(_, v)| v.clone()).unwrap();
        for (a, b) in [("Ours", "IFT"), ("IFT", "CFT"), ("Ours", "CFT")] {
            let t = paired_t_test(&get(a), &get(b))?;
            println!("{a} vs {b}: diff {:+.4} p {:.2e}", t.mean_difference, t.p);
        }
    }
    Ok(())
}

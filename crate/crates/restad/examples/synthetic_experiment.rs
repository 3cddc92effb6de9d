//! Trains on the bundled synthetic benchmark for a few seeds and prints the
//! AUC-ROC of each scoring criterion.
//!
//! cargo run --release -p restad --example synthetic_experiment -- [seeds] [init]

use std::time::Instant;

use restad::config::{InitMode, RunConfig};
use restad::pipeline::{evaluate_criteria, load_source, prepare, raw_scores, train};
use restad_core::score::Criterion;

fn main() -> restad::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let init = match args.next().as_deref() {
        Some("random") => InitMode::Random,
        _ => InitMode::Kmeans,
    };
    let started = Instant::now();
    let mut sums = [0.0; 4];
    for seed in 0..seeds {
        let cfg = RunConfig {
            init,
            ..RunConfig::default()
        }
        .with_seed(seed)
        .resolved()?;
        let data = prepare(&load_source(&cfg.data)?, cfg.model.window_len)?;
        let trained = train(&cfg, &data)?;
        let raw = raw_scores(&trained.model, &data.test, cfg.train.batch_size)?;
        let evals = evaluate_criteria(
            &raw,
            &data.labels,
            &Criterion::ALL,
            cfg.anomaly_ratio,
            cfg.max_buffer,
            &data.name,
            "restad",
        )?;
        let last = trained
            .phases
            .last()
            .unwrap()
            .1
            .epochs
            .last()
            .map_or(f64::NAN, |e| e.mean_loss);
        print!("seed {seed}: loss {last:.4}");
        for (i, e) in evals.iter().enumerate() {
            sums[i] += e.report.metrics.auc_roc;
            print!("  {} {:.4}", e.report.criterion, e.report.metrics.auc_roc);
        }
        println!(
            "  gamma {:.3}",
            trained.model.rbf.as_ref().map_or(0.0, |r| r.gamma())
        );
    }
    print!("mean:");
    for (i, c) in Criterion::ALL.iter().enumerate() {
        print!("  {c} {:.4}", sums[i] / seeds as f64);
    }
    println!("\n{:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

//! Compare the features reaching the classification head after back-distill
//! and after direct learning: fraction of active ReLU units per layer and the
//! spread of the features in their top two principal components. Writes the
//! per-run CSVs under the output directory.
//!
//! cargo run --release --example feature_diagnostics -- [out_dir]

use std::path::PathBuf;

use transplant::bench::{BenchConfig, InsertionBench};
use transplant::train::Method;

fn main() -> transplant::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "feature_diagnostics".into()));
    let bench = InsertionBench::build(BenchConfig {
        teacher_samples: 600,
        teacher_epochs: 15,
        pool_samples: 100,
        eval_samples: 300,
        epochs: 20,
        ..BenchConfig::default()
    })?;
    for method in [Method::BackDistill, Method::DirectLearn] {
        let run = bench.run(method, 50, 1)?;
        let stats = bench.feature_stats(&run.adapter, 200)?;
        println!(
            "{:>13}: error {:.2}%  positive fraction {:.4}  PC-plane variance {:.1}",
            method.name(),
            100.0 * run.report.final_metric,
            stats.mean_positive_fraction(),
            stats.plane_variance()
        );
        stats.write_csvs(&out.join(method.name()))?;
    }
    println!("csvs in {}", out.display());
    Ok(())
}

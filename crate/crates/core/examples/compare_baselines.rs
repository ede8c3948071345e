//! Back-distillation against direct learning and output distillation on the
//! same insertion problem and sample budget.
//!
//! cargo run --release --example compare_baselines -- [N]

use transplant::bench::{BenchConfig, InsertionBench};
use transplant::train::Method;

fn main() -> transplant::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let bench = InsertionBench::build(BenchConfig {
        teacher_samples: 600,
        teacher_epochs: 15,
        pool_samples: 100,
        eval_samples: 400,
        epochs: 20,
        ..BenchConfig::default()
    })?;
    println!("N = {n}");
    for method in [Method::BackDistill, Method::DirectLearn, Method::OutputDistill] {
        let run = bench.run(method, n, 1)?;
        println!("{:>15}: error {:.2}%", method.name(), 100.0 * run.report.final_metric);
    }
    Ok(())
}

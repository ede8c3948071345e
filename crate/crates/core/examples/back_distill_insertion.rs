//! Insert a fresh adapter between a pretrained category module and its
//! classification head, then learn it by back-distillation from a handful of
//! labelled samples. N = 0 uses only the pseudo-gradient term.
//!
//! cargo run --release --example back_distill_insertion

use transplant::bench::{BenchConfig, InsertionBench};
use transplant::train::Method;

fn main() -> transplant::Result<()> {
    let bench = InsertionBench::build(BenchConfig {
        teacher_samples: 600,
        teacher_epochs: 15,
        pool_samples: 100,
        eval_samples: 400,
        epochs: 20,
        ..BenchConfig::default()
    })?;
    println!("teacher train accuracy {:.3}", bench.teacher_report.accuracy[0]);
    for n in [0usize, 10, 50] {
        let run = bench.run(Method::BackDistill, n, 1)?;
        let last = run.report.rows.last().expect("at least one epoch");
        println!(
            "N={n:3}  error {:.2}%  distill loss {:.4}  alpha {:.3}",
            100.0 * run.report.final_metric,
            last.distill_loss,
            last.alpha
        );
    }
    Ok(())
}

//! Transplant the ellipse category module under the blob segmentation head.
//! Only the new 1x1 adapter is learned; both pretrained modules stay frozen.
//!
//! cargo run --release --example segmentation_transplant -- [N]

use transplant::bench::{BenchConfig, SegmentationBench};
use transplant::train::Method;

fn main() -> transplant::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let bench = SegmentationBench::build(BenchConfig {
        teacher_samples: 400,
        teacher_epochs: 12,
        pool_samples: 100,
        eval_samples: 300,
        epochs: 15,
        ..BenchConfig::default()
    })?;
    for (name, r) in ["blob", "ellipse"].iter().zip(&bench.teacher_reports) {
        println!("{name} teacher pixel accuracy {:.4}", r.accuracy[0]);
    }
    for method in [Method::BackDistill, Method::DirectLearn, Method::OutputDistill] {
        let (net, report) = bench.run(method, n)?;
        println!(
            "{:>15}: pixel accuracy {:.2}% -> {:.2}%  pairs {:?}",
            method.name(),
            100.0 * report.metric_before(),
            100.0 * report.metric_after(),
            net.pairs()
        );
    }
    Ok(())
}

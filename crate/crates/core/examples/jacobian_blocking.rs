//! Jacobian distillation needs real ReLU masks, so a student head whose units
//! are mostly off passes almost no gradient back to the adapter. The
//! pseudo-gradient term ignores the input and keeps its gradient. This sweeps
//! a downward bias shift on the student head and prints both gradient norms.
//!
//! cargo run --release --example jacobian_blocking

use transplant::bench::{BenchConfig, InsertionBench};
use transplant::layers::LayerSpec;
use transplant::net::NetModule;
use transplant::pseudograd::{PathCaches, PseudoPath, Role};
use transplant::train::{AdapterProblem, Method};

/// Copy of `g` with every conv that feeds a ReLU shifted down by `shift`.
fn shifted(g: &NetModule, shift: f32) -> NetModule {
    let mut g = g.clone();
    for i in 0..g.layers.len() {
        let feeds_relu = matches!(g.layers.get(i + 1), Some(LayerSpec::Relu { .. }));
        if let (LayerSpec::Conv(c), true) = (&mut g.layers[i], feeds_relu) {
            c.bias.data_mut().iter_mut().for_each(|v| *v -= shift);
        }
    }
    g
}

fn main() -> transplant::Result<()> {
    let bench = InsertionBench::build(BenchConfig {
        teacher_samples: 400,
        teacher_epochs: 10,
        pool_samples: 40,
        eval_samples: 40,
        ..BenchConfig::default()
    })?;
    let adapter = bench.adapter(1)?;
    let pseudo = bench.train_config(Method::BackDistill, 0).pseudo;
    let features: Vec<_> = bench.eval.iter().take(16).map(|s| &s.features).collect();

    println!("shift  blocked  |grad jacobian|  |grad back-distill|");
    for shift in [0.0f32, 0.25, 0.5, 1.0, 2.0, 4.0] {
        let g_s = shifted(bench.task(), shift);
        let path = PseudoPath::new(&bench.feature_shape)
            .then(&adapter.layers, Role::Adapter)
            .then(&g_s.layers, Role::Task);
        let p = AdapterProblem {
            adapter: &adapter,
            student_task: &g_s,
            teacher_task: Some(bench.task()),
            feature_shape: &bench.feature_shape,
            pseudo: &pseudo,
        };
        let (mut off, mut total, mut jd, mut bd) = (0usize, 0usize, 0.0, 0.0);
        for (i, x) in features.iter().enumerate() {
            let mut caches = PathCaches::default();
            path.forward(x, Some(&mut caches))?;
            for (l, input) in g_s.layers.iter().zip(&caches.inputs[1]) {
                if matches!(l, LayerSpec::Relu { .. }) {
                    off += input.data().iter().filter(|&&v| v <= 0.0).count();
                    total += input.len();
                }
            }
            jd += p.jacobian_term(x, i as u64, 1.0)?.1.norm();
            bd += p.back_distill_term(&p.pseudo_targets(i as u64)?, 1.0, 1.0)?.1.norm();
        }
        let k = features.len() as f64;
        println!(
            "{shift:5.2}  {:6.1}%  {:15.4e}  {:19.4e}",
            100.0 * off as f64 / total as f64,
            jd / k,
            bd / k
        );
    }
    Ok(())
}

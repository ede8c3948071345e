//! Pseudo-gradients do not look at the input. The same adapter and head give
//! the same D′ for any image, while the real gradient changes with it.

use transplant::net::{build_adapter, presets, AdapterKernel, AdapterSpec};
use transplant::pseudograd::{pseudo_backward, real_backward, sample_gy, PathCaches, PseudoGradConfig, PseudoPath, Role};
use transplant::{Rng, Tensor};

fn main() -> transplant::Result<()> {
    let mut rng = Rng::new(1, 0);
    let adapter = build_adapter(
        "h",
        &AdapterSpec {
            channels: 4,
            convs: 1,
            kernel: AdapterKernel::Conv3x3,
            reorder_seed: Some(2),
            beta: None,
            init_seed: 3,
        },
    )?;
    let head = presets::classification_head("g", 4, 8, &mut rng)?;
    let shape = [14, 14, 4];
    let path = PseudoPath::new(&shape)
        .then(&adapter.layers, Role::Adapter)
        .then(&head.layers, Role::Task);

    for (name, cfg) in [
        ("scalar G_y, second-order task ReLUs", PseudoGradConfig::exp1(5)),
        ("random-map G_y, lowest ReLU second", PseudoGradConfig::exp2(5)),
        ("random-map G_y, first-order ReLUs", PseudoGradConfig::exp3(5)),
    ] {
        let gy = sample_gy(&cfg, 0, &path.output_shape()?)?;
        let blind = pseudo_backward(&path, &gy, &cfg, 0, None)?.0;
        let mut same = true;
        let mut real_spread = 0.0f64;
        let mut first_real: Option<Tensor> = None;
        for _ in 0..5 {
            let x = Tensor::uniform(&shape, 0.0, 1.0, &mut rng)?;
            let mut caches = PathCaches::default();
            path.forward(&x, Some(&mut caches))?;
            same &= pseudo_backward(&path, &gy, &cfg, 0, Some(&caches))?.0.bit_eq(&blind);
            let real = real_backward(&path, &gy, &caches)?;
            if let Some(r0) = &first_real {
                real_spread = real_spread.max(real.sub(r0)?.frobenius_norm()?);
            } else {
                first_real = Some(real);
            }
        }
        println!(
            "{name}: |D'| = {:.4}, identical across inputs: {same}, real-gradient spread {real_spread:.4}",
            blind.frobenius_norm()?
        );
    }
    Ok(())
}

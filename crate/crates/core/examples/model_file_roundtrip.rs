//! Build a small transplant net, save it, load it back and list its modules.

use transplant::model_file::{load_net, net_to_bytes, save_net};
use transplant::net::{build_adapter, presets, AdapterKernel, AdapterSpec};
use transplant::ops::add_teacher;
use transplant::{Rng, TransplantNet};

fn main() -> transplant::Result<()> {
    let mut rng = Rng::new(4, 0);
    let f = presets::category_module("ellipse", 4, &mut rng)?;
    let g = presets::classification_head("ellipse.cls", 4, 6, &mut rng)?;
    let mut net = add_teacher(&TransplantNet::new(), &f, &[g])?;
    net.add_category(presets::category_module("ring", 4, &mut rng)?.frozen())?;
    let adapter = build_adapter(
        "ring->ellipse.cls",
        &AdapterSpec {
            channels: 4,
            convs: 3,
            kernel: AdapterKernel::Conv1x1,
            reorder_seed: Some(9),
            beta: Some(1.2),
            init_seed: 1,
        },
    )?;
    net.connect("ring", "ellipse.cls", adapter, (28, 28))?;

    let dir = tempfile_dir();
    let path = dir.join("net.tpnt");
    save_net(&net, &path)?;
    let back = load_net(&path)?;
    println!("{} bytes, identical after reload: {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), net_to_bytes(&back)? == net_to_bytes(&net)?);
    for m in back.modules() {
        println!(
            "{:24} {:?} frozen={} layers={} params={} fingerprint={:016x}",
            m.id,
            m.kind,
            m.frozen,
            m.layers.len(),
            m.param_count(),
            m.fingerprint()
        );
    }
    println!("pairs: {:?}", back.pairs());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("tpnt-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}

//! Pretrain a teacher (category module plus classification and segmentation
//! heads) and save it as a single-teacher transplant net.
//!
//! cargo run --release --example pretrain_teacher -- [model.tpnt]

use transplant::data::{generate_dataset, Family, SynthCategory};
use transplant::model_file::save_net;
use transplant::ops::add_teacher;
use transplant::train::{pretrain_teacher, PretrainConfig, TeacherSpec};
use transplant::{TaskKind, TransplantNet};

fn main() -> transplant::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "teacher.tpnt".into());
    let cat = SynthCategory::new("ellipse", Family::Ellipse);
    let data = generate_dataset(&cat, 600, 1)?;
    let spec = TeacherSpec {
        channels: 16,
        ..TeacherSpec::new("ellipse", &[TaskKind::Classification, TaskKind::Segmentation])
    };
    let cfg = PretrainConfig {
        epochs: 15,
        learning_rate: 0.05,
        ..PretrainConfig::default()
    };
    let (teacher, report) = pretrain_teacher(&spec, &data, &cfg)?;
    for (e, loss) in &report.losses {
        println!("epoch {e:2}  loss {loss:.4}");
    }
    for (t, acc) in teacher.tasks.iter().zip(&report.accuracy) {
        println!("{}: train accuracy {acc:.4}", t.id);
    }
    if let Some(e) = report.gate_error(cfg.gate) {
        println!("warning: {e}");
    }
    let net = add_teacher(&TransplantNet::new(), &teacher.category, &teacher.tasks)?;
    save_net(&net, &path)?;
    println!("saved {path} with pairs {:?}", net.pairs());
    Ok(())
}

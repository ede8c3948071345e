//! Grow a transplant net one operation at a time: start from a ring teacher,
//! transplant the ellipse category under the ring classifier, carry over the
//! ellipse segmentation head and link ellipse to the ring segmenter. Every
//! step prints the (category, task) grid and the metric of each pair. Earlier
//! pairs keep their metrics exactly. The last link is small (8 channels, 20
//! labels) and barely moves off the all-background prediction.
//!
//! cargo run --release --example grow_transplant_net -- [out.tpnt]

use transplant::data::{generate_dataset, Family, Sample, SynthCategory};
use transplant::eval::evaluate_path;
use transplant::model_file::save_net;
use transplant::net::{AdapterKernel, AdapterSpec};
use transplant::ops::{add_task_module, add_teacher, connect_existing, transplant_category, LinkData, LinkSpec, TaskSource};
use transplant::pseudograd::PseudoGradConfig;
use transplant::train::{pretrain_teacher, PretrainConfig, SampleBudget, Teacher, TeacherSpec, TrainConfig};
use transplant::{TaskKind, TransplantNet};

fn teacher(fam: Family) -> transplant::Result<Teacher> {
    let cat = SynthCategory::new(fam.name(), fam);
    let data = generate_dataset(&cat, 600, 1)?;
    let spec = TeacherSpec {
        channels: 8,
        ..TeacherSpec::new(fam.name(), &[TaskKind::Classification, TaskKind::Segmentation])
    };
    let cfg = PretrainConfig {
        epochs: 15,
        learning_rate: 0.05,
        ..PretrainConfig::default()
    };
    Ok(pretrain_teacher(&spec, &data, &cfg)?.0)
}

/// Each pair is scored on evaluation images of its own category.
fn show(step: &str, net: &TransplantNet, evals: &[(&str, &[Sample])]) -> transplant::Result<()> {
    println!("{step}");
    for (c, t) in net.pairs() {
        let eval = evals.iter().find(|(id, _)| *id == c).map_or(&[][..], |(_, s)| s);
        let r = evaluate_path(&net.compose_path(&c, &t)?, eval)?;
        println!("  ({c}, {t})  {} {:.4}", r.metric, r.value);
    }
    Ok(())
}

fn main() -> transplant::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "grown.tpnt".into());
    let ring = teacher(Family::Ring)?;
    let ell = teacher(Family::Ellipse)?;
    let ell_cat = SynthCategory::new("ellipse", Family::Ellipse);
    let pool = generate_dataset(&ell_cat, 60, 2)?;
    let eval = generate_dataset(&ell_cat, 200, 3)?;
    let ring_eval = generate_dataset(&SynthCategory::new("ring", Family::Ring), 200, 3)?;
    let evals = [("ring", &ring_eval[..]), ("ellipse", &eval[..])];
    let data = LinkData {
        train: &pool,
        eval: &eval,
        reference_images: &[],
    };
    let spec = |kernel, pseudo| LinkSpec {
        adapter: AdapterSpec {
            channels: 8,
            convs: 1,
            kernel,
            reorder_seed: None,
            beta: None,
            init_seed: 1,
        },
        reference_category: None,
        train: TrainConfig {
            samples: SampleBudget::Count(20),
            epochs: 15,
            distill_pool: 64,
            probe_size: 16,
            pseudo,
            ..TrainConfig::default()
        },
    };

    let net = add_teacher(&TransplantNet::new(), &ring.category, &ring.tasks)?;
    show("ring teacher", &net, &evals)?;

    let cls = ell.task(TaskKind::Classification).expect("classification head");
    // scalar G_y′ for the classifier; random-map G_y′ with the automatic λ
    // stays at chance on this pair
    let (net, report) = transplant_category(
        &net,
        &ell.category,
        cls,
        "ring.cls",
        &spec(AdapterKernel::Conv3x3, PseudoGradConfig::exp1(1)),
        data,
    )?;
    show("after transplanting ellipse -> ring.cls", &net, &evals)?;
    println!("ring.cls on ellipse: {:.4} -> {:.4}", report.metric_before(), report.metric_after());

    let seg = ell.task(TaskKind::Segmentation).expect("segmentation head").clone();
    let (net, _) = add_task_module(
        &net,
        TaskSource::Carried {
            module: seg,
            category: "ellipse".into(),
        },
    )?;
    show("after carrying ellipse.seg", &net, &evals)?;

    let (net, report) = connect_existing(
        &net,
        "ellipse",
        "ring.seg",
        Some("ellipse.seg"),
        &spec(AdapterKernel::Conv1x1, PseudoGradConfig::exp3(1)),
        data,
    )?;
    show("after linking ellipse -> ring.seg", &net, &evals)?;
    println!("ring.seg on ellipse: {:.4} -> {:.4}", report.metric_before(), report.metric_after());

    net.check_consistency()?;
    save_net(&net, &path)?;
    println!("saved {path}");
    Ok(())
}

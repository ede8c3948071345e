//! Growth operations on a transplant net.
//!
//! Every operation takes the net by reference and returns an updated copy;
//! file-level jobs write to a new path and never touch their inputs.

use std::path::PathBuf;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model_file::{load_net, save_net};
use crate::net::{build_adapter, AdapterSpec, NetModule, TaskKind, TransplantNet};
use crate::tensor::Tensor;
use crate::train::{
    estimate_beta, featurize, train_adapter, train_task_heads, AdapterJob, Method, PretrainConfig,
    PretrainReport, TrainConfig, TrainReport,
};

/// Images and labels available to one adapter-learning run.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinkData<'a> {
    /// Samples of the category being linked; the first `N` are used as labeled.
    pub train: &'a [Sample],
    pub eval: &'a [Sample],
    /// Student-side reference images `I_S` for β; empty keeps β = 1.
    pub reference_images: &'a [Tensor],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkReport {
    pub category: String,
    pub task: String,
    pub beta: f64,
    pub train: TrainReport,
}

impl LinkReport {
    pub fn metric_before(&self) -> f64 {
        self.train.initial_metric
    }

    pub fn metric_after(&self) -> f64 {
        self.train.final_metric
    }
}

/// How a new adapter is learned.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkSpec {
    pub adapter: AdapterSpec,
    /// Student-side category whose features set the β reference.
    pub reference_category: Option<String>,
    pub train: TrainConfig,
}

fn learn_link(
    net: &mut TransplantNet,
    category: &str,
    task: &str,
    teacher_task: Option<&NetModule>,
    spec: &LinkSpec,
    data: LinkData<'_>,
) -> Result<LinkReport> {
    let key = (category.to_string(), task.to_string());
    if net.adapters.contains_key(&key) {
        return Err(Error::AlreadyConnected {
            category: category.into(),
            task: task.into(),
        });
    }
    let f = net
        .categories
        .get(category)
        .ok_or_else(|| Error::UnknownModule(category.into()))?;
    let g_s = net.tasks.get(task).ok_or_else(|| Error::UnknownModule(task.into()))?;
    let first = data.train.first().or(data.eval.first()).ok_or(Error::InsufficientData {
        requested: 1,
        available: 0,
    })?;
    let image_shape = first.image.shape().to_vec();
    let feature_shape = f.output_shape(&image_shape)?;
    if feature_shape[2] != spec.adapter.channels {
        return Err(Error::shape(&feature_shape, &[feature_shape[0], feature_shape[1], spec.adapter.channels]));
    }

    let beta = match (&spec.reference_category, data.reference_images.is_empty()) {
        (Some(r), false) => {
            let f_s = net.categories.get(r).ok_or_else(|| Error::UnknownModule(r.clone()))?;
            let i_t: Vec<Tensor> = data.train.iter().map(|s| s.image.clone()).collect();
            estimate_beta(f, f_s, &i_t, data.reference_images)?
        }
        _ => 1.0,
    };
    let mut adapter = build_adapter(format!("{category}->{task}"), &AdapterSpec {
        beta: Some(beta as f32),
        ..spec.adapter.clone()
    })?;
    let mid = adapter.output_shape(&feature_shape)?;
    let out_shape = g_s.output_shape(&mid)?;
    let kind = g_s.task_kind();
    if let Some(t) = teacher_task {
        if t.task_kind() != kind {
            return Err(Error::InvalidSetup(format!("teacher `{}` and student `{task}` differ in task kind", t.id)));
        }
    }

    // the reference category's existing link into the task, for α
    let reference_link = spec
        .reference_category
        .as_ref()
        .and_then(|r| net.adapters.get(&(r.clone(), task.to_string())))
        .filter(|a| !a.is_identity_link())
        .cloned();
    let train_fs = featurize(f, data.train, kind, &out_shape)?;
    let eval_fs = featurize(f, data.eval, kind, &out_shape)?;
    let mut g_frozen = g_s.clone();
    g_frozen.frozen = true;
    let teacher = teacher_task.map(|t| NetModule {
        frozen: true,
        ..t.clone()
    });
    let report = train_adapter(
        AdapterJob {
            adapter: &mut adapter,
            student_task: &g_frozen,
            teacher_task: teacher.as_ref(),
            feature_shape,
            train: &train_fs,
            eval: &eval_fs,
            reference_link: reference_link.as_ref(),
        },
        &spec.train,
    )?;
    net.connect(category, task, adapter, (image_shape[0], image_shape[1]))?;
    Ok(LinkReport {
        category: category.into(),
        task: task.into(),
        beta,
        train: report,
    })
}

/// Copy a teacher's category module into `net` and learn an adapter to the
/// existing task module `task`, distilling from the teacher's task module.
pub fn transplant_category(
    net: &TransplantNet,
    teacher_category: &NetModule,
    teacher_task: &NetModule,
    task: &str,
    spec: &LinkSpec,
    data: LinkData<'_>,
) -> Result<(TransplantNet, LinkReport)> {
    let mut out = net.clone();
    out.add_category(NetModule {
        frozen: true,
        ..teacher_category.clone()
    })?;
    let teacher = (spec.train.method != Method::DirectLearn).then_some(teacher_task);
    let report = learn_link(&mut out, &teacher_category.id, task, teacher, spec, data)?;
    Ok((out, report))
}

/// Learn an adapter between a category and a task module already in `net`.
/// `teacher_task` names a task module natively linked to the category.
pub fn connect_existing(
    net: &TransplantNet,
    category: &str,
    task: &str,
    teacher_task: Option<&str>,
    spec: &LinkSpec,
    data: LinkData<'_>,
) -> Result<(TransplantNet, LinkReport)> {
    let mut out = net.clone();
    let teacher = match teacher_task {
        Some(t) => Some(out.tasks.get(t).cloned().ok_or_else(|| Error::UnknownModule(t.into()))?),
        None => None,
    };
    let report = learn_link(&mut out, category, task, teacher.as_ref(), spec, data)?;
    Ok((out, report))
}

/// Where a new task module comes from.
#[derive(Clone, Debug)]
pub enum TaskSource<'a> {
    /// Train a fresh head on features of one existing category module.
    Fresh {
        module: NetModule,
        category: String,
        data: &'a [Sample],
        cfg: PretrainConfig,
    },
    /// Import a teacher's head; it links natively to its own category module,
    /// which must already be in the net.
    Carried { module: NetModule, category: String },
}

/// Register a task module and its native link to a single category module.
pub fn add_task_module(net: &TransplantNet, source: TaskSource<'_>) -> Result<(TransplantNet, Option<PretrainReport>)> {
    let mut out = net.clone();
    let (mut module, category, report) = match source {
        TaskSource::Fresh {
            module,
            category,
            data,
            cfg,
        } => {
            if out.tasks.contains_key(&module.id) {
                return Err(Error::AlreadyExists(module.id));
            }
            let f = out
                .categories
                .get(&category)
                .ok_or_else(|| Error::UnknownModule(category.clone()))?;
            let mut heads = [module];
            let report = train_task_heads(f, &mut heads, data, &cfg)?;
            let [module] = heads;
            (module, category, Some(report))
        }
        TaskSource::Carried { module, category } => (module, category, None),
    };
    module.frozen = true;
    let id = module.id.clone();
    let hw = native_hw(&out, &category)?;
    out.add_task(module)?;
    out.connect(&category, &id, NetModule::identity_link(format!("{category}->{id}")), hw)?;
    Ok((out, report))
}

/// Add a pretrained teacher (category + heads, natively linked) to a net.
pub fn add_teacher(net: &TransplantNet, category: &NetModule, tasks: &[NetModule]) -> Result<TransplantNet> {
    let mut out = net.clone();
    out.add_category(NetModule {
        frozen: true,
        ..category.clone()
    })?;
    for t in tasks {
        let (next, _) = add_task_module(
            &out,
            TaskSource::Carried {
                module: t.clone(),
                category: category.id.clone(),
            },
        )?;
        out = next;
    }
    Ok(out)
}

/// Canvas size implied by the category module; every category expects a
/// `CANVAS×CANVAS×1` image.
fn native_hw(net: &TransplantNet, category: &str) -> Result<(usize, usize)> {
    if !net.categories.contains_key(category) {
        return Err(Error::UnknownModule(category.into()));
    }
    Ok((crate::data::CANVAS, crate::data::CANVAS))
}

/// The task module natively linked to `category` with the given kind.
pub fn native_task<'a>(net: &'a TransplantNet, category: &str, kind: TaskKind) -> Option<&'a NetModule> {
    net.adapters
        .iter()
        .filter(|((c, _), a)| c == category && a.is_identity_link())
        .filter_map(|((_, t), _)| net.tasks.get(t))
        .find(|t| t.task_kind() == kind)
}

/// File-level transplant: teacher and student nets on disk, result to a new path.
#[derive(Clone, Debug, PartialEq)]
pub struct TransplantJob {
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub category: String,
    pub task: String,
    pub link: LinkSpec,
    pub output: PathBuf,
}

pub fn run_transplant_job(job: &TransplantJob, data: LinkData<'_>) -> Result<LinkReport> {
    if job.output == job.student || job.output == job.teacher {
        return Err(Error::InvalidSetup("output must be a new file".into()));
    }
    let teacher = load_net(&job.teacher)?;
    let student = load_net(&job.student)?;
    let f = teacher
        .categories
        .get(&job.category)
        .ok_or_else(|| Error::UnknownModule(job.category.clone()))?;
    let kind = student
        .tasks
        .get(&job.task)
        .ok_or_else(|| Error::UnknownModule(job.task.clone()))?
        .task_kind();
    let g_t = native_task(&teacher, &job.category, kind).ok_or_else(|| {
        Error::InvalidSetup(format!("teacher has no {kind:?} task module for `{}`", job.category))
    })?;
    let (out, report) = transplant_category(&student, f, g_t, &job.task, &job.link, data)?;
    save_net(&out, &job.output)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Family, SynthCategory};
    use crate::net::{presets, AdapterKernel};
    use crate::tensor::Rng;
    use crate::train::SampleBudget;

    fn teacher(id: &str, seed: u64) -> (NetModule, Vec<NetModule>) {
        let mut rng = Rng::new(seed, 0);
        let f = presets::category_module(id, 4, &mut rng).unwrap();
        let cls = presets::classification_head(&format!("{id}.cls"), 4, 3, &mut rng).unwrap();
        let seg = presets::segmentation_head(&format!("{id}.seg"), 4, 3, &mut rng).unwrap();
        (f, vec![cls, seg])
    }

    fn spec(method: Method) -> LinkSpec {
        LinkSpec {
            adapter: AdapterSpec {
                channels: 4,
                convs: 1,
                kernel: AdapterKernel::Conv1x1,
                reorder_seed: Some(1),
                beta: None,
                init_seed: 2,
            },
            reference_category: Some("a".into()),
            train: TrainConfig {
                method,
                samples: SampleBudget::Count(4),
                epochs: 2,
                batch_size: 4,
                distill_pool: 4,
                probe_size: 2,
                ..TrainConfig::default()
            },
        }
    }

    fn samples(family: Family, n: usize, seed: u64) -> Vec<Sample> {
        generate_dataset(&SynthCategory::new("x", family), n, seed).unwrap()
    }

    #[test]
    fn add_teacher_links_natively() {
        let (f, tasks) = teacher("a", 1);
        let net = add_teacher(&TransplantNet::new(), &f, &tasks).unwrap();
        assert!(net.categories["a"].frozen && net.tasks.values().all(|t| t.frozen));
        assert_eq!(native_task(&net, "a", TaskKind::Segmentation).unwrap().id, "a.seg");
        assert_eq!(native_task(&net, "a", TaskKind::Classification).unwrap().id, "a.cls");
        assert!(native_task(&net, "b", TaskKind::Classification).is_none());
        assert!(add_teacher(&net, &f, &[]).is_err());
    }

    #[test]
    fn transplant_adds_one_adapter_and_leaves_the_rest() {
        let (fa, ta) = teacher("a", 1);
        let (fb, tb) = teacher("b", 2);
        let net = add_teacher(&TransplantNet::new(), &fa, &ta).unwrap();
        let before = net.fingerprints();
        let train = samples(Family::Ring, 8, 3);
        let eval = samples(Family::Ring, 4, 4);
        let refs: Vec<Tensor> = samples(Family::Ellipse, 4, 5).into_iter().map(|s| s.image).collect();
        let data = LinkData {
            train: &train,
            eval: &eval,
            reference_images: &refs,
        };
        let (out, report) = transplant_category(&net, &fb, &tb[0], "a.cls", &spec(Method::BackDistill), data).unwrap();
        assert_eq!(out.adapters.len(), net.adapters.len() + 1);
        let after = out.fingerprints();
        for (k, v) in &before {
            assert_eq!(after.get(k), Some(v), "{k}");
        }
        assert!(report.beta > 0.0 && report.beta != 1.0);
        assert_eq!(report.train.rows.len(), 2);
        // the input net is untouched
        assert_eq!(net.fingerprints(), before);

        let again = connect_existing(&out, "b", "a.cls", None, &spec(Method::DirectLearn), data);
        assert!(matches!(again, Err(Error::AlreadyConnected { .. })));
        let (out2, _) = connect_existing(&out, "b", "a.seg", None, &spec(Method::DirectLearn), data).unwrap();
        assert!(out2.adapters.contains_key(&("b".to_string(), "a.seg".to_string())));
        assert!(matches!(
            connect_existing(&out, "b", "a.seg", Some("zzz"), &spec(Method::BackDistill), data),
            Err(Error::UnknownModule(_))
        ));
        let mut wide = spec(Method::DirectLearn);
        wide.adapter.channels = 5;
        assert!(connect_existing(&out, "b", "a.seg", None, &wide, data).is_err());
        // a classification teacher cannot supervise a segmentation head
        assert!(connect_existing(&out, "b", "a.seg", Some("a.cls"), &spec(Method::BackDistill), data).is_err());
    }

    #[test]
    fn fresh_task_module_trains_over_frozen_category() {
        let (fa, ta) = teacher("a", 1);
        let net = add_teacher(&TransplantNet::new(), &fa, &ta[..1]).unwrap();
        let mut rng = Rng::new(7, 0);
        let head = presets::classification_head("new.cls", 4, 3, &mut rng).unwrap();
        let data = samples(Family::Ellipse, 8, 1);
        let cfg = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        };
        let source = |m: NetModule| TaskSource::Fresh {
            module: m,
            category: "a".into(),
            data: &data,
            cfg: cfg.clone(),
        };
        let (out, report) = add_task_module(&net, source(head.clone())).unwrap();
        assert!(report.is_some());
        assert_eq!(out.categories["a"].fingerprint(), net.categories["a"].fingerprint());
        assert_ne!(out.tasks["new.cls"].fingerprint(), head.fingerprint());
        assert!(matches!(add_task_module(&out, source(head)), Err(Error::AlreadyExists(_))));
    }

    #[test]
    fn file_job_refuses_to_overwrite_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let (fa, ta) = teacher("a", 1);
        let net = add_teacher(&TransplantNet::new(), &fa, &ta).unwrap();
        let p = dir.path().join("n.tpnt");
        save_net(&net, &p).unwrap();
        let job = TransplantJob {
            teacher: p.clone(),
            student: p.clone(),
            category: "a".into(),
            task: "a.cls".into(),
            link: spec(Method::BackDistill),
            output: p.clone(),
        };
        assert!(matches!(run_transplant_job(&job, LinkData::default()), Err(Error::InvalidSetup(_))));
        let missing = TransplantJob {
            teacher: dir.path().join("missing.tpnt"),
            output: dir.path().join("out.tpnt"),
            ..job
        };
        assert!(matches!(run_transplant_job(&missing, LinkData::default()), Err(Error::Io { .. })));
    }
}

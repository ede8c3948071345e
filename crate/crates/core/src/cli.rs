//! `tpnt` subcommands. Each run writes its artifacts and the fully resolved
//! config (`config.ini`) into one run directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{export_dataset, generate_dataset, load_image_dir, LabelRule, Sample, SynthCategory, CANVAS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_path, feature_stats};
use crate::model_file::{load_net, save_net};
use crate::net::{AdapterSpec, TransplantNet};
use crate::ops::{add_teacher, run_transplant_job, LinkData, LinkSpec, TransplantJob};
use crate::tensor::Tensor;
use crate::train::{pretrain_teacher, TeacherSpec};

#[derive(Debug, Parser)]
#[command(name = "tpnt", version, about = "Grow transplant nets by learning adapters with back-distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    GenData,
    Pretrain,
    Transplant,
    Evaluate,
    ExportFeatures,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic splits as PGM images plus manifests.
    GenData(RunArgs),
    /// Train a teacher (category module + task heads) and save it as a net.
    Pretrain(RunArgs),
    /// Copy a teacher's category into a student net and learn its adapter.
    Transplant(RunArgs),
    /// Score wired pairs of a net on the eval split.
    Evaluate(RunArgs),
    /// Dump PCA projections and ReLU pass-through statistics of one pair.
    ExportFeatures(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// INI config file; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed; beats `data.seed` and TPNT_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, short, default_value = "run")]
    pub out: PathBuf,
}

impl Command {
    fn split(self) -> (CommandKind, RunArgs) {
        match self {
            Command::GenData(a) => (CommandKind::GenData, a),
            Command::Pretrain(a) => (CommandKind::Pretrain, a),
            Command::Transplant(a) => (CommandKind::Transplant, a),
            Command::Evaluate(a) => (CommandKind::Evaluate, a),
            Command::ExportFeatures(a) => (CommandKind::ExportFeatures, a),
        }
    }
}

/// Config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    for s in &args.sets {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// 0 ok, 2 weak teacher, 1 anything else.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(Error::WeakTeacher { .. }) => 2,
        Err(_) => 1,
    }
}

/// Entry point of the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (kind, args) = cli.command.split();
    let r = resolve_config(&args).and_then(|cfg| run(kind, &cfg, &args.out));
    if let Err(e) = &r {
        eprintln!("error: {e}");
    }
    exit_code(&r)
}

/// Run one command with a resolved config.
pub fn run(kind: CommandKind, cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.train.threads > 0 {
        // Only the first call in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.train.threads).build_global();
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.ini"), &cfg.to_ini())?;
    match kind {
        CommandKind::GenData => gen_data(cfg, out),
        CommandKind::Pretrain => pretrain(cfg, out),
        CommandKind::Transplant => transplant(cfg, out),
        CommandKind::Evaluate => evaluate(cfg, out),
        CommandKind::ExportFeatures => export_features(cfg, out),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Teacher,
    Pool,
    Eval,
    Reference,
}

impl Split {
    const ALL: [Split; 4] = [Split::Teacher, Split::Pool, Split::Eval, Split::Reference];

    fn name(self) -> &'static str {
        match self {
            Split::Teacher => "teacher",
            Split::Pool => "pool",
            Split::Eval => "eval",
            Split::Reference => "reference",
        }
    }
}

const REFERENCE_COUNT: usize = 128;

fn render_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    let target = SynthCategory::new(cfg.category_id(), d.family);
    let (cat, count, offset) = match split {
        Split::Teacher => (target, d.teacher_count, 0),
        Split::Pool => (target, d.pool_count, 1),
        Split::Eval => (target, d.eval_count, 2),
        Split::Reference => (SynthCategory::new(d.reference_family.name(), d.reference_family), REFERENCE_COUNT, 3),
    };
    generate_dataset(&cat, count, d.seed.wrapping_add(offset))
}

/// A split as training and evaluation see it: `positives_only` applies to
/// the pool and eval splits, and reference images are always positives.
fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let all = match &cfg.data.dir {
        Some(dir) => load_image_dir(&dir.join(split.name()), LabelRule::FromMask)?,
        None => render_split(cfg, split)?,
    };
    let keep_positives = match split {
        Split::Teacher => false,
        Split::Pool | Split::Eval => cfg.data.positives_only,
        Split::Reference => true,
    };
    Ok(if keep_positives {
        all.into_iter().filter(|s| s.label == 1).collect()
    } else {
        all
    })
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let root = out.join("data");
    for split in Split::ALL {
        let samples = render_split(cfg, split)?;
        export_dataset(&samples, &root.join(split.name()))?;
        println!("{}: {} samples", split.name(), samples.len());
    }
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = &cfg.teacher;
    let data = load_split(cfg, Split::Teacher)?;
    let spec = TeacherSpec {
        category_id: cfg.category_id(),
        channels: t.channels,
        hidden: t.hidden,
        tasks: t.tasks.clone(),
        init_seed: t.init_seed,
    };
    let (teacher, report) = pretrain_teacher(&spec, &data, &cfg.pretrain_config())?;
    let net = add_teacher(&TransplantNet::new(), &teacher.category, &teacher.tasks)?;
    save_net(&net, out.join("model.tpnt"))?;

    let mut csv = String::from("epoch,loss\n");
    for (e, l) in &report.losses {
        let _ = writeln!(csv, "{e},{l:.9}");
    }
    write(&out.join("pretrain.csv"), &csv)?;
    let mut acc = String::from("task,train_accuracy\n");
    for (m, a) in teacher.tasks.iter().zip(&report.accuracy) {
        let _ = writeln!(acc, "{},{a:.9}", m.id);
        println!("{}: train accuracy {a:.4}", m.id);
    }
    write(&out.join("accuracy.csv"), &acc)?;
    match report.gate_error(t.gate) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn transplant(cfg: &RunConfig, out: &Path) -> Result<()> {
    let teacher = load_net(&cfg.teacher.path)?;
    let student = load_net(&cfg.student.path)?;
    let category = cfg.category_id();
    let f = teacher
        .categories
        .get(&category)
        .ok_or_else(|| Error::UnknownModule(category.clone()))?;
    let channels = f.output_shape(&[CANVAS, CANVAS, 1])?[2];
    let task = match (cfg.student.task.as_str(), student.tasks.len()) {
        ("", 1) => student.tasks.keys().next().cloned().unwrap_or_default(),
        ("", _) => return Err(Error::Config { line: 0, msg: "student.task must name a task module of the student".into() }),
        (t, _) => t.to_string(),
    };
    let reference = match cfg.student.reference.as_str() {
        "" => student
            .adapters
            .iter()
            .find(|((_, t), a)| *t == task && a.is_identity_link())
            .map(|((c, _), _)| c.clone()),
        r => Some(r.to_string()),
    };

    let pool = load_split(cfg, Split::Pool)?;
    let eval = load_split(cfg, Split::Eval)?;
    let reference_images: Vec<Tensor> = match reference {
        Some(_) => load_split(cfg, Split::Reference)?.into_iter().map(|s| s.image).collect(),
        None => Vec::new(),
    };
    let a = &cfg.adapter;
    let job = TransplantJob {
        teacher: cfg.teacher.path.clone(),
        student: cfg.student.path.clone(),
        category: category.clone(),
        task: task.clone(),
        link: LinkSpec {
            adapter: AdapterSpec {
                channels,
                convs: a.convs,
                kernel: a.kernel,
                reorder_seed: a.reorder_seed,
                beta: None,
                init_seed: a.init_seed,
            },
            reference_category: reference,
            train: cfg.train_config(),
        },
        output: out.join("model.tpnt"),
    };
    let report = run_transplant_job(&job, LinkData {
        train: &pool,
        eval: &eval,
        reference_images: &reference_images,
    })?;
    write(&out.join("train.csv"), &report.train.to_csv())?;
    let r = &report.train;
    let summary = format!(
        "category,task,method,samples,beta,lambda,metric,before,after\n{},{},{},{},{:.9},{:.9},{},{:.9},{:.9}\n",
        report.category,
        report.task,
        r.method.name(),
        r.samples,
        report.beta,
        r.lambda,
        r.metric_name,
        r.initial_metric,
        r.final_metric
    );
    write(&out.join("link.csv"), &summary)?;
    println!(
        "{} -> {}: {} {:.4} -> {:.4}",
        report.category, report.task, r.metric_name, r.initial_metric, r.final_metric
    );
    Ok(())
}

fn eval_category(cfg: &RunConfig) -> String {
    if cfg.eval.category.is_empty() {
        cfg.category_id()
    } else {
        cfg.eval.category.clone()
    }
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_net(&cfg.eval.model)?;
    let category = eval_category(cfg);
    let tasks: Vec<String> = if cfg.eval.task.is_empty() {
        net.pairs().into_iter().filter(|(c, _)| *c == category).map(|(_, t)| t).collect()
    } else {
        vec![cfg.eval.task.clone()]
    };
    if tasks.is_empty() {
        return Err(Error::NotConnected { category, task: "*".into() });
    }
    let samples = load_split(cfg, Split::Eval)?;
    let mut csv = String::from("category,task,metric,value,count\n");
    for t in tasks {
        let r = evaluate_path(&net.compose_path(&category, &t)?, &samples)?;
        let _ = writeln!(csv, "{category},{t},{},{:.9},{}", r.metric, r.value, r.count);
        println!("{category} -> {t}: {} {:.4} over {}", r.metric, r.value, r.count);
    }
    write(&out.join("eval.csv"), &csv)
}

fn export_features(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_net(&cfg.eval.model)?;
    let category = eval_category(cfg);
    let task = if cfg.eval.task.is_empty() {
        let wired: Vec<String> = net.pairs().into_iter().filter(|(c, _)| *c == category).map(|(_, t)| t).collect();
        match wired.as_slice() {
            [t] => t.clone(),
            _ => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("eval.task must pick one of {wired:?}"),
                })
            }
        }
    } else {
        cfg.eval.task.clone()
    };
    let images: Vec<Tensor> = load_split(cfg, Split::Eval)?
        .into_iter()
        .take(cfg.eval.feature_images)
        .map(|s| s.image)
        .collect();
    let stats = feature_stats(&net.compose_path(&category, &task)?, &images)?;
    stats.write_csvs(out)?;
    println!(
        "{category} -> {task}: positive fraction {:.4}, PC-plane variance {:.4}",
        stats.mean_positive_fraction(),
        stats.plane_variance()
    );
    Ok(())
}

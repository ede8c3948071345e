//! Run configuration: INI sections of `key = value` lines.
//!
//! Every key has a default, so an empty file is a valid config. Unknown
//! sections or keys and unparsable values are errors carrying the line
//! number. `RunConfig::to_ini` writes every key back out, which is what a run
//! directory stores.

use std::path::{Path, PathBuf};

use crate::data::Family;
use crate::error::{Error, Result};
use crate::net::{AdapterKernel, TaskKind};
use crate::pseudograd::{GySpec, PseudoGradConfig, ReluPlan, XRandSpec};
use crate::train::{AlphaRule, LambdaRule, Method, PretrainConfig, SampleBudget, TrainConfig};

/// Environment variable read as the lowest-priority seed.
pub const SEED_ENV: &str = "TPNT_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Master seed; the teacher, pool, eval and reference sets use `seed`, `seed+1`, `seed+2`, `seed+3`.
    pub seed: u64,
    pub family: Family,
    /// Category id; empty means the family name.
    pub category: String,
    /// Family of the student-side reference images used for β.
    pub reference_family: Family,
    pub teacher_count: usize,
    pub pool_count: usize,
    pub eval_count: usize,
    /// Drop negatives (useful for segmentation).
    pub positives_only: bool,
    /// Read `teacher/`, `pool/`, `eval/`, `reference/` from here instead of rendering.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub path: PathBuf,
    pub tasks: Vec<TaskKind>,
    pub channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub gate: f64,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub path: PathBuf,
    /// Task module the transplanted category is linked to.
    pub task: String,
    /// Category whose features give the β reference; empty means the task's native category.
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub convs: usize,
    pub kernel: AdapterKernel,
    pub reorder_seed: Option<u64>,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub method: Method,
    pub samples: SampleBudget,
    pub lambda: LambdaRule,
    pub alpha: AlphaRule,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub distill_pool: usize,
    pub probe_size: usize,
    pub grad_clip: Option<f64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSection {
    pub gy: GySpec,
    pub task_relu: ReluPlan,
    pub adapter_relu: ReluPlan,
    pub xrand: XRandSpec,
    pub substitute_pooling: bool,
    pub skip_dropout: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub model: PathBuf,
    /// Empty means `data.category`.
    pub category: String,
    /// Empty means every task wired to the category.
    pub task: String,
    pub feature_images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub adapter: AdapterConfig,
    pub train: TrainSection,
    pub pseudo: PseudoSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = PseudoGradConfig::exp2(0);
        RunConfig {
            data: DataConfig {
                seed: 0,
                family: Family::Ellipse,
                category: String::new(),
                reference_family: Family::Ring,
                teacher_count: 1000,
                pool_count: 200,
                eval_count: 1000,
                positives_only: false,
                dir: None,
            },
            teacher: TeacherConfig {
                path: "teacher.tpnt".into(),
                tasks: vec![TaskKind::Classification],
                channels: 16,
                hidden: 16,
                epochs: 20,
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 16,
                gate: 0.95,
                init_seed: 7,
            },
            student: StudentConfig {
                path: "student.tpnt".into(),
                task: String::new(),
                reference: String::new(),
            },
            adapter: AdapterConfig {
                convs: 1,
                kernel: AdapterKernel::Conv3x3,
                reorder_seed: None,
                init_seed: 5,
            },
            train: TrainSection {
                method: t.method,
                samples: t.samples,
                lambda: t.lambda,
                alpha: t.alpha,
                learning_rate: t.learning_rate,
                momentum: t.momentum,
                batch_size: t.batch_size,
                epochs: t.epochs,
                distill_pool: t.distill_pool,
                probe_size: t.probe_size,
                grad_clip: t.grad_clip,
                threads: 0,
            },
            pseudo: PseudoSection {
                gy: p.gy,
                task_relu: p.task_relu,
                adapter_relu: p.adapter_relu,
                xrand: p.xrand,
                substitute_pooling: p.substitute_pooling,
                skip_dropout: p.skip_dropout,
            },
            eval: EvalConfig {
                model: "model.tpnt".into(),
                category: String::new(),
                task: String::new(),
                feature_images: 200,
            },
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn family(v: &str) -> std::result::Result<Family, String> {
    Family::parse(v).ok_or_else(|| format!("unknown shape family `{v}`"))
}

fn task_kind(v: &str) -> std::result::Result<TaskKind, String> {
    match v {
        "classification" | "cls" => Ok(TaskKind::Classification),
        "segmentation" | "seg" => Ok(TaskKind::Segmentation),
        _ => Err(format!("unknown task kind `{v}`")),
    }
}

fn task_name(k: TaskKind) -> &'static str {
    match k {
        TaskKind::Classification => "classification",
        TaskKind::Segmentation => "segmentation",
    }
}

fn relu(v: &str) -> std::result::Result<ReluPlan, String> {
    match v {
        "first" => Ok(ReluPlan::First),
        "second" => Ok(ReluPlan::Second),
        "lowest-second" => Ok(ReluPlan::LowestSecond),
        "real" => Ok(ReluPlan::RealMask),
        _ => Err(format!("unknown dummy ReLU `{v}` (first, second, lowest-second, real)")),
    }
}

fn relu_name(r: ReluPlan) -> &'static str {
    match r {
        ReluPlan::First => "first",
        ReluPlan::Second => "second",
        ReluPlan::LowestSecond => "lowest-second",
        ReluPlan::RealMask => "real",
    }
}

fn optional<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

impl RunConfig {
    /// Parse INI text. Keys that appear nowhere keep their defaults; a
    /// `data.seed` missing from the text falls back to `TPNT_SEED`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seed_set = false;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split(['#', ';']).next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(name) = l.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line, msg: format!("malformed section header `{l}`") })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config { line, msg: format!("unknown section [{name}]") });
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got `{l}`") })?;
            if section.is_empty() {
                return Err(Error::Config { line, msg: "key outside of any section".into() });
            }
            let k = k.trim();
            cfg.set(&section, k, v.trim()).map_err(|msg| Error::Config { line, msg })?;
            seed_set |= section == "data" && k == "seed";
        }
        if !seed_set {
            if let Ok(s) = std::env::var(SEED_ENV) {
                cfg.data.seed = num(&s).map_err(|m| Error::Config { line: 0, msg: format!("{SEED_ENV}: {m}") })?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `section.key=value` override. Errors report line 0.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let bad = |msg: String| Error::Config { line: 0, msg: format!("--set {spec}: {msg}") };
        let (path, v) = spec.split_once('=').ok_or_else(|| bad("expected section.key=value".into()))?;
        let (s, k) = path.trim().split_once('.').ok_or_else(|| bad("expected section.key=value".into()))?;
        if !SECTIONS.contains(&s) {
            return Err(bad(format!("unknown section [{s}]")));
        }
        self.set(s, k, v.trim()).map_err(bad)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let unknown = || Err(format!("unknown key `{key}` in [{section}]"));
        match section {
            "data" => {
                let d = &mut self.data;
                match key {
                    "seed" => d.seed = num(v)?,
                    "family" => d.family = family(v)?,
                    "category" => d.category = v.into(),
                    "reference_family" => d.reference_family = family(v)?,
                    "teacher_count" => d.teacher_count = num(v)?,
                    "pool_count" => d.pool_count = num(v)?,
                    "eval_count" => d.eval_count = num(v)?,
                    "positives_only" => d.positives_only = boolean(v)?,
                    "dir" => d.dir = optional(v, |s| Ok(PathBuf::from(s)))?,
                    _ => return unknown(),
                }
            }
            "teacher" => {
                let t = &mut self.teacher;
                match key {
                    "path" => t.path = v.into(),
                    "tasks" => {
                        t.tasks = v.split(',').map(|s| task_kind(s.trim())).collect::<std::result::Result<_, _>>()?;
                    }
                    "channels" => t.channels = num(v)?,
                    "hidden" => t.hidden = num(v)?,
                    "epochs" => t.epochs = num(v)?,
                    "learning_rate" => t.learning_rate = num(v)?,
                    "momentum" => t.momentum = num(v)?,
                    "batch_size" => t.batch_size = num(v)?,
                    "gate" => t.gate = num(v)?,
                    "init_seed" => t.init_seed = num(v)?,
                    _ => return unknown(),
                }
            }
            "student" => {
                let s = &mut self.student;
                match key {
                    "path" => s.path = v.into(),
                    "task" => s.task = v.into(),
                    "reference" => s.reference = v.into(),
                    _ => return unknown(),
                }
            }
            "adapter" => {
                let a = &mut self.adapter;
                match key {
                    "convs" => a.convs = num(v)?,
                    "kernel" => {
                        a.kernel = match v {
                            "3x3" => AdapterKernel::Conv3x3,
                            "1x1" => AdapterKernel::Conv1x1,
                            _ => return Err(format!("kernel must be 3x3 or 1x1, got `{v}`")),
                        }
                    }
                    "reorder_seed" => a.reorder_seed = optional(v, num)?,
                    "init_seed" => a.init_seed = num(v)?,
                    _ => return unknown(),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "method" => t.method = Method::parse(v).ok_or_else(|| format!("unknown method `{v}`"))?,
                    "samples" => {
                        t.samples = match v {
                            "all" => SampleBudget::All,
                            _ => SampleBudget::Count(num(v)?),
                        }
                    }
                    "lambda" => {
                        t.lambda = match v {
                            "auto" => LambdaRule::Auto,
                            _ => LambdaRule::Fixed(num(v)?),
                        }
                    }
                    "alpha" => {
                        t.alpha = match v {
                            "reference" => AlphaRule::Reference,
                            "adapter" => AlphaRule::Adapter,
                            _ => return Err(format!("alpha must be `reference` or `adapter`, got `{v}`")),
                        }
                    }
                    "learning_rate" => t.learning_rate = num(v)?,
                    "momentum" => t.momentum = num(v)?,
                    "batch_size" => t.batch_size = num(v)?,
                    "epochs" => t.epochs = num(v)?,
                    "distill_pool" => t.distill_pool = num(v)?,
                    "probe_size" => t.probe_size = num(v)?,
                    "grad_clip" => t.grad_clip = optional(v, num)?,
                    "threads" => t.threads = num(v)?,
                    _ => return unknown(),
                }
            }
            "pseudo" => {
                let p = &mut self.pseudo;
                match key {
                    "gy" => {
                        p.gy = match v {
                            "one" => GySpec::ScalarOne,
                            "map" => GySpec::RandomMap {
                                size: match p.gy {
                                    GySpec::RandomMap { size } => size,
                                    GySpec::ScalarOne => 7,
                                },
                            },
                            _ => return Err(format!("gy must be `one` or `map`, got `{v}`")),
                        }
                    }
                    "gy_size" => {
                        let size = num(v)?;
                        if let GySpec::RandomMap { size: s } = &mut p.gy {
                            *s = size;
                        } else if size != 7 {
                            return Err("gy_size needs gy = map".into());
                        }
                    }
                    "task_relu" => p.task_relu = relu(v)?,
                    "adapter_relu" => p.adapter_relu = relu(v)?,
                    "xrand_fraction" => {
                        p.xrand = match optional(v, num)? {
                            Some(f) => XRandSpec::PerImage { pos_fraction: f },
                            None => XRandSpec::None,
                        }
                    }
                    "substitute_pooling" => p.substitute_pooling = boolean(v)?,
                    "skip_dropout" => p.skip_dropout = boolean(v)?,
                    _ => return unknown(),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "model" => e.model = v.into(),
                    "category" => e.category = v.into(),
                    "task" => e.task = v.into(),
                    "feature_images" => e.feature_images = num(v)?,
                    _ => return unknown(),
                }
            }
            _ => return Err(format!("unknown section [{section}]")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in file order.
    pub fn to_ini(&self) -> String {
        let d = &self.data;
        let t = &self.teacher;
        let s = &self.student;
        let a = &self.adapter;
        let r = &self.train;
        let p = &self.pseudo;
        let e = &self.eval;
        let (gy, gy_size) = match p.gy {
            GySpec::ScalarOne => ("one", 7),
            GySpec::RandomMap { size } => ("map", size),
        };
        let sections: [(&str, Vec<(&str, String)>); 7] = [
            ("data", vec![
                ("seed", d.seed.to_string()),
                ("family", d.family.name().into()),
                ("category", d.category.clone()),
                ("reference_family", d.reference_family.name().into()),
                ("teacher_count", d.teacher_count.to_string()),
                ("pool_count", d.pool_count.to_string()),
                ("eval_count", d.eval_count.to_string()),
                ("positives_only", d.positives_only.to_string()),
                ("dir", show_opt(&d.dir.as_ref().map(|p| p.display().to_string()))),
            ]),
            ("teacher", vec![
                ("path", t.path.display().to_string()),
                ("tasks", t.tasks.iter().map(|&k| task_name(k)).collect::<Vec<_>>().join(", ")),
                ("channels", t.channels.to_string()),
                ("hidden", t.hidden.to_string()),
                ("epochs", t.epochs.to_string()),
                ("learning_rate", t.learning_rate.to_string()),
                ("momentum", t.momentum.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("gate", t.gate.to_string()),
                ("init_seed", t.init_seed.to_string()),
            ]),
            ("student", vec![
                ("path", s.path.display().to_string()),
                ("task", s.task.clone()),
                ("reference", s.reference.clone()),
            ]),
            ("adapter", vec![
                ("convs", a.convs.to_string()),
                ("kernel", match a.kernel {
                    AdapterKernel::Conv3x3 => "3x3".into(),
                    AdapterKernel::Conv1x1 => "1x1".into(),
                }),
                ("reorder_seed", show_opt(&a.reorder_seed)),
                ("init_seed", a.init_seed.to_string()),
            ]),
            ("train", vec![
                ("method", r.method.name().into()),
                ("samples", match r.samples {
                    SampleBudget::All => "all".into(),
                    SampleBudget::Count(n) => n.to_string(),
                }),
                ("lambda", match r.lambda {
                    LambdaRule::Auto => "auto".into(),
                    LambdaRule::Fixed(l) => l.to_string(),
                }),
                ("alpha", match r.alpha {
                    AlphaRule::Reference => "reference".into(),
                    AlphaRule::Adapter => "adapter".into(),
                }),
                ("learning_rate", r.learning_rate.to_string()),
                ("momentum", r.momentum.to_string()),
                ("batch_size", r.batch_size.to_string()),
                ("epochs", r.epochs.to_string()),
                ("distill_pool", r.distill_pool.to_string()),
                ("probe_size", r.probe_size.to_string()),
                ("grad_clip", show_opt(&r.grad_clip)),
                ("threads", r.threads.to_string()),
            ]),
            ("pseudo", vec![
                ("gy", gy.into()),
                ("gy_size", gy_size.to_string()),
                ("task_relu", relu_name(p.task_relu).into()),
                ("adapter_relu", relu_name(p.adapter_relu).into()),
                ("xrand_fraction", match p.xrand {
                    XRandSpec::None => "none".into(),
                    XRandSpec::PerImage { pos_fraction } => pos_fraction.to_string(),
                }),
                ("substitute_pooling", p.substitute_pooling.to_string()),
                ("skip_dropout", p.skip_dropout.to_string()),
            ]),
            ("eval", vec![
                ("model", e.model.display().to_string()),
                ("category", e.category.clone()),
                ("task", e.task.clone()),
                ("feature_images", e.feature_images.to_string()),
            ]),
        ];
        let mut out = String::new();
        for (name, keys) in sections {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in keys {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn category_id(&self) -> String {
        if self.data.category.is_empty() {
            self.data.family.name().into()
        } else {
            self.data.category.clone()
        }
    }

    pub fn pseudo_config(&self) -> PseudoGradConfig {
        let p = &self.pseudo;
        PseudoGradConfig {
            gy: p.gy,
            task_relu: p.task_relu,
            adapter_relu: p.adapter_relu,
            xrand: p.xrand,
            substitute_pooling: p.substitute_pooling,
            skip_dropout: p.skip_dropout,
            seed: self.data.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            samples: t.samples,
            lambda: t.lambda,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.data.seed,
            pseudo: self.pseudo_config(),
            distill_pool: t.distill_pool,
            grad_clip: t.grad_clip,
            probe_size: t.probe_size,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let t = &self.teacher;
        PretrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            seed: self.data.seed,
            gate: t.gate,
        }
    }

    /// Checks that do not depend on which command runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { line: 0, msg: msg.into() });
        if self.teacher.tasks.is_empty() {
            return bad("teacher.tasks must name at least one task");
        }
        if self.teacher.channels == 0 || self.teacher.hidden == 0 || self.adapter.convs == 0 {
            return bad("teacher.channels, teacher.hidden and adapter.convs must be positive");
        }
        if !(0.0..=1.0).contains(&self.teacher.gate) {
            return bad("teacher.gate must lie in [0, 1]");
        }
        self.pseudo_config().validate()?;
        let mut t = self.train_config();
        // N = 0 with a labeled method is rejected only when a transplant runs.
        t.method = Method::BackDistill;
        t.validate()
    }
}

const SECTIONS: [&str; 7] = ["data", "teacher", "student", "adapter", "train", "pseudo", "eval"];

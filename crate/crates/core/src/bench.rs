//! Desk-scale benchmarks shared by the examples and the acceptance tests.
//!
//! `InsertionBench` inserts a fresh adapter between the category module and
//! the classification head of one pretrained teacher (`g_S == g_T`).
//! `SegmentationBench` transplants a category module under the segmentation
//! head of a reference category.

use rayon::prelude::*;

use crate::data::{generate_dataset, Family, Sample, SynthCategory};
use crate::error::Result;
use crate::eval::{feature_stats, FeatureStats};
use crate::net::{build_adapter, AdapterKernel, AdapterSpec, ComposedPath, NetModule, TaskKind, TransplantNet};
use crate::ops::{add_teacher, transplant_category, LinkData, LinkReport, LinkSpec};
use crate::pseudograd::PseudoGradConfig;
use crate::tensor::Tensor;
use crate::train::{
    featurize, pretrain_teacher, train_adapter, AdapterJob, AdapterProblem, FeatureSample, Method, PretrainConfig,
    PretrainReport, SampleBudget, Teacher, TeacherSpec, TrainConfig, TrainReport,
};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub channels: usize,
    pub teacher_samples: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    /// Samples of the target category available for adapter training.
    pub pool_samples: usize,
    pub eval_samples: usize,
    pub epochs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 1,
            channels: 16,
            teacher_samples: 1000,
            teacher_epochs: 20,
            teacher_lr: 0.05,
            pool_samples: 200,
            eval_samples: 1000,
            epochs: 30,
        }
    }
}

impl BenchConfig {
    fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.teacher_epochs,
            learning_rate: self.teacher_lr,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    fn teacher(&self, cat: &SynthCategory, tasks: &[TaskKind]) -> Result<(Teacher, PretrainReport)> {
        let data = generate_dataset(cat, self.teacher_samples, self.seed)?;
        let spec = TeacherSpec {
            channels: self.channels,
            ..TeacherSpec::new(&cat.id, tasks)
        };
        pretrain_teacher(&spec, &data, &self.pretrain())
    }
}

/// Adapter inserted into one pretrained classification teacher.
pub struct InsertionBench {
    pub config: BenchConfig,
    pub teacher: Teacher,
    pub teacher_report: PretrainReport,
    pub feature_shape: Vec<usize>,
    pub train: Vec<FeatureSample>,
    pub eval: Vec<FeatureSample>,
    pub eval_images: Vec<Tensor>,
}

pub struct InsertionRun {
    pub adapter: NetModule,
    pub report: TrainReport,
}

impl InsertionBench {
    pub fn build(config: BenchConfig) -> Result<Self> {
        let cat = SynthCategory::new("ellipse", Family::Ellipse);
        let (teacher, teacher_report) = config.teacher(&cat, &[TaskKind::Classification])?;
        let feature_shape = teacher.category.output_shape(&[crate::data::CANVAS, crate::data::CANVAS, 1])?;
        let g = &teacher.tasks[0];
        let out = g.output_shape(&feature_shape)?;
        let pool = generate_dataset(&cat, config.pool_samples, config.seed + 1)?;
        let evals = generate_dataset(&cat, config.eval_samples, config.seed + 2)?;
        let train = featurize(&teacher.category, &pool, TaskKind::Classification, &out)?;
        let eval = featurize(&teacher.category, &evals, TaskKind::Classification, &out)?;
        Ok(InsertionBench {
            config,
            teacher,
            teacher_report,
            feature_shape,
            train,
            eval,
            eval_images: evals.into_iter().map(|s| s.image).collect(),
        })
    }

    pub fn task(&self) -> &NetModule {
        &self.teacher.tasks[0]
    }

    pub fn adapter(&self, convs: usize) -> Result<NetModule> {
        build_adapter(
            "ellipse->ellipse.cls",
            &AdapterSpec {
                channels: self.config.channels,
                convs,
                kernel: AdapterKernel::Conv3x3,
                reorder_seed: None,
                beta: None,
                init_seed: self.config.seed + 4,
            },
        )
    }

    pub fn train_config(&self, method: Method, n: usize) -> TrainConfig {
        TrainConfig {
            method,
            samples: SampleBudget::Count(n),
            epochs: self.config.epochs,
            seed: self.config.seed,
            pseudo: PseudoGradConfig::exp1(self.config.seed),
            ..TrainConfig::default()
        }
    }

    pub fn problem<'a>(&'a self, adapter: &'a NetModule, pseudo: &'a PseudoGradConfig) -> AdapterProblem<'a> {
        AdapterProblem {
            adapter,
            student_task: self.task(),
            teacher_task: Some(self.task()),
            feature_shape: &self.feature_shape,
            pseudo,
        }
    }

    pub fn run(&self, method: Method, n: usize, convs: usize) -> Result<InsertionRun> {
        self.run_with(&self.train_config(method, n), convs)
    }

    pub fn run_with(&self, cfg: &TrainConfig, convs: usize) -> Result<InsertionRun> {
        let mut adapter = self.adapter(convs)?;
        let report = train_adapter(
            AdapterJob {
                adapter: &mut adapter,
                student_task: self.task(),
                teacher_task: Some(self.task()),
                feature_shape: self.feature_shape.clone(),
                train: &self.train,
                eval: &self.eval,
                reference_link: None,
            },
            cfg,
        )?;
        Ok(InsertionRun { adapter, report })
    }

    /// Diagnostics of `g_S` on up to `limit` evaluation images.
    pub fn feature_stats(&self, adapter: &NetModule, limit: usize) -> Result<FeatureStats> {
        let path = ComposedPath {
            category: &self.teacher.category,
            adapter,
            task: self.task(),
        };
        feature_stats(&path, &self.eval_images[..limit.min(self.eval_images.len())])
    }
}

/// Category transplant under a reference category's segmentation head.
pub struct SegmentationBench {
    pub config: BenchConfig,
    pub reference: Teacher,
    pub target: Teacher,
    pub student: TransplantNet,
    pub pool: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub reference_images: Vec<Tensor>,
    pub teacher_reports: [PretrainReport; 2],
}

impl SegmentationBench {
    /// Segmentation data is restricted to images that contain the category.
    pub fn build(config: BenchConfig) -> Result<Self> {
        let refc = SynthCategory::new("blob", Family::Blob);
        let tgt = SynthCategory::new("ellipse", Family::Ellipse);
        let (a, b) = rayon::join(
            || config.teacher(&refc, &[TaskKind::Segmentation]),
            || config.teacher(&tgt, &[TaskKind::Segmentation]),
        );
        let ((reference, rr), (target, rt)) = (a?, b?);
        let student = add_teacher(&TransplantNet::new(), &reference.category, &reference.tasks)?;
        let positives = |n: usize, seed: u64, cat: &SynthCategory| -> Result<Vec<Sample>> {
            Ok(generate_dataset(cat, n, seed)?.into_iter().filter(|s| s.label == 1).collect())
        };
        // Half of each generated set is positive.
        let pool = positives(2 * config.pool_samples, config.seed + 1, &tgt)?;
        let eval = positives(config.eval_samples, config.seed + 2, &tgt)?;
        let reference_images = positives(128, config.seed + 3, &refc)?
            .into_par_iter()
            .map(|s| s.image)
            .collect();
        Ok(SegmentationBench {
            config,
            reference,
            target,
            student,
            pool,
            eval,
            reference_images,
            teacher_reports: [rr, rt],
        })
    }

    pub fn link_spec(&self, method: Method, n: usize) -> LinkSpec {
        LinkSpec {
            adapter: AdapterSpec {
                channels: self.config.channels,
                convs: 1,
                kernel: AdapterKernel::Conv1x1,
                reorder_seed: Some(self.config.seed + 2),
                beta: None,
                init_seed: self.config.seed + 4,
            },
            reference_category: Some(self.reference.category.id.clone()),
            train: TrainConfig {
                method,
                samples: SampleBudget::Count(n),
                epochs: self.config.epochs,
                seed: self.config.seed,
                pseudo: PseudoGradConfig::exp3(self.config.seed),
                ..TrainConfig::default()
            },
        }
    }

    pub fn run(&self, method: Method, n: usize) -> Result<(TransplantNet, LinkReport)> {
        transplant_category(
            &self.student,
            &self.target.category,
            &self.target.tasks[0],
            &self.reference.tasks[0].id,
            &self.link_spec(method, n),
            LinkData {
                train: &self.pool,
                eval: &self.eval,
                reference_images: &self.reference_images,
            },
        )
    }
}

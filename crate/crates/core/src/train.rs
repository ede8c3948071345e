//! Adapter training: back-distillation, the three baselines, scale
//! estimation, and teacher pretraining.
//!
//! Only adapter parameters move during adapter training. The task term
//! flows through real gradients; the back-distillation term flows through
//! the pseudo-gradient tape and reaches conv kernels only.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{downsample_mask, Sample};
use crate::error::{Error, Result};
use crate::eval::{error_rate, mask_factor, pixel_accuracy, sigmoid};
use crate::layers::{self, LayerSpec};
use crate::net::{ModuleGrads, ModuleKind, NetModule, TaskKind};
use crate::pseudograd::{
    distill_grad, distill_loss, pseudo_backward, real_backward, sample_gy, PathCaches, PseudoGradConfig,
    PseudoPath, Role,
};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    BackDistill,
    DirectLearn,
    OutputDistill,
    JacobianDistill,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::BackDistill => "back-distill",
            Method::DirectLearn => "direct-learn",
            Method::OutputDistill => "output-distill",
            Method::JacobianDistill => "jacobian-distill",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::BackDistill, Method::DirectLearn, Method::OutputDistill, Method::JacobianDistill]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleBudget {
    Count(usize),
    All,
}

impl SampleBudget {
    pub fn resolve(self, available: usize) -> Result<usize> {
        match self {
            SampleBudget::All => Ok(available),
            SampleBudget::Count(n) if n > available => Err(Error::InsufficientData {
                requested: n,
                available,
            }),
            SampleBudget::Count(n) => Ok(n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaRule {
    /// `10/E_T` for classification, `1/E_T` for segmentation.
    Auto,
    Fixed(f64),
}

/// Where the student-side pseudo-gradients in `α = E‖D′_T‖ / E‖D′_S‖` come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaRule {
    /// The student task module on its existing reference path, without the
    /// adapter being learned. Fixed for the whole run.
    Reference,
    /// The student path through the adapter being learned, re-estimated each epoch.
    Adapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub samples: SampleBudget,
    pub lambda: LambdaRule,
    pub alpha: AlphaRule,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pseudo: PseudoGradConfig,
    /// Image ids whose `(G_y′, x_rand)` draws feed the pseudo-gradient term.
    pub distill_pool: usize,
    /// Global gradient-norm cap per step; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Ids used to estimate α and `E_T`.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::BackDistill,
            samples: SampleBudget::Count(0),
            lambda: LambdaRule::Auto,
            alpha: AlphaRule::Reference,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            pseudo: PseudoGradConfig::exp2(0),
            distill_pool: 256,
            grad_clip: Some(5.0),
            probe_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == SampleBudget::Count(0) && self.method != Method::BackDistill {
            return Err(Error::InvalidSetup(format!(
                "{} needs labeled samples (N = 0 is back-distill only)",
                self.method.name()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSetup("batch size must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidSetup("gradient clip must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSetup("learning rate must be > 0 and momentum in [0, 1)".into()));
        }
        if self.method == Method::BackDistill && (self.distill_pool == 0 || self.probe_size == 0) {
            return Err(Error::InvalidSetup("distill pool and probe must be non-empty".into()));
        }
        self.pseudo.validate()
    }

    /// Learning rate for an epoch: ×0.1 from two thirds of the schedule on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs >= 3 && epoch >= (2 * self.epochs) / 3 {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleStats {
    pub alpha: f64,
    pub beta: f64,
    pub e_t: f64,
}

fn mean_norm(ts: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for t in ts {
        acc += t.frobenius_norm()?;
    }
    Ok(acc / ts.len() as f64)
}

/// `β = E_{I∈I_S}‖f_S(I)‖_F / E_{I∈I_T}‖f(I)‖_F`.
pub fn estimate_beta(f: &NetModule, f_s: &NetModule, i_t: &[Tensor], i_s: &[Tensor]) -> Result<f64> {
    if i_t.is_empty() || i_s.is_empty() {
        return Err(Error::DegenerateStats("empty image set for β"));
    }
    let num: Vec<Tensor> = i_s.par_iter().map(|i| f_s.forward(i)).collect::<Result<_>>()?;
    let den: Vec<Tensor> = i_t.par_iter().map(|i| f.forward(i)).collect::<Result<_>>()?;
    let d = mean_norm(&den)?;
    if d <= 0.0 {
        return Err(Error::DegenerateStats("teacher features have zero norm"));
    }
    Ok(mean_norm(&num)? / d)
}

/// `α = E‖D′_T‖ / E‖D′_S‖`.
pub fn estimate_alpha(d_t: &[Tensor], d_s: &[Tensor]) -> Result<f64> {
    if d_t.is_empty() || d_s.is_empty() {
        return Err(Error::DegenerateStats("empty pseudo-gradient set for α"));
    }
    let d = mean_norm(d_s)?;
    if d <= 0.0 {
        return Err(Error::DegenerateStats("student pseudo-gradients vanish"));
    }
    Ok(mean_norm(d_t)? / d)
}

/// `λ = 10/E_T` (classification) or `1/E_T` (segmentation), where `E_T` is
/// the mean absolute entry of `D′_T`.
pub fn lambda_rule(task: TaskKind, e_t: f64) -> Result<f64> {
    if !(e_t > 0.0) || !e_t.is_finite() {
        return Err(Error::DegenerateStats("E_T must be positive"));
    }
    Ok(match task {
        TaskKind::Classification => 10.0 / e_t,
        TaskKind::Segmentation => 1.0 / e_t,
    })
}

/// Ground truth for one output.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(u8),
    /// One-hot at output resolution.
    Mask(Tensor),
}

impl Target {
    pub fn for_sample(kind: TaskKind, s: &Sample, output_shape: &[usize]) -> Result<Self> {
        match kind {
            TaskKind::Classification => Ok(Target::Label(s.label)),
            TaskKind::Segmentation => {
                let m = s
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::InvalidSetup(format!("sample {} has no mask", s.id)))?;
                let probe = Tensor::from_parts(output_shape.to_vec(), vec![0.0; output_shape.iter().product()]);
                let k = mask_factor(m, &probe);
                let t = if k == 1 { m.clone() } else { downsample_mask(m, k)? };
                if t.shape() != output_shape {
                    return Err(Error::shape(output_shape, t.shape()));
                }
                Ok(Target::Mask(t))
            }
        }
    }
}

fn softmax_rows(y: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = y.hwc()?;
    let mut out = Vec::with_capacity(y.len());
    for px in y.data().chunks_exact(c) {
        let m = px.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = px.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Ok(out)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Task loss and its gradient w.r.t. the output: logistic cross-entropy for
/// classification, mean per-pixel cross-entropy for segmentation.
pub fn task_loss(y: &Tensor, target: &Target) -> Result<(f64, Tensor)> {
    match target {
        Target::Label(l) => {
            if y.len() != 1 {
                return Err(Error::shape(&[1, 1, 1], y.shape()));
            }
            let z = y.data()[0] as f64;
            let t = *l as f64;
            let loss = softplus(z) - t * z;
            let g = (sigmoid(z) - t) as f32;
            Ok((loss, Tensor::from_parts(y.shape().to_vec(), vec![g])))
        }
        Target::Mask(m) => {
            if m.shape() != y.shape() {
                return Err(Error::shape(m.shape(), y.shape()));
            }
            soft_cross_entropy(y, &m.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        }
    }
}

fn soft_cross_entropy(y: &Tensor, target_probs: &[f64]) -> Result<(f64, Tensor)> {
    let (h, w, _) = y.hwc()?;
    let p = softmax_rows(y)?;
    let pixels = (h * w) as f64;
    let loss = -p
        .iter()
        .zip(target_probs)
        .map(|(&q, &t)| if t > 0.0 { t * q.max(1e-300).ln() } else { 0.0 })
        .sum::<f64>()
        / pixels;
    let g = p
        .iter()
        .zip(target_probs)
        .map(|(&q, &t)| ((q - t) / pixels) as f32)
        .collect();
    Ok((loss, Tensor::from_parts(y.shape().to_vec(), g)))
}

/// `CrossEntropy(y_S, y_T)` against the teacher's soft outputs, and its gradient w.r.t. `y_S`.
pub fn output_distill_loss(y_s: &Tensor, y_t: &Tensor) -> Result<(f64, Tensor)> {
    if y_s.shape() != y_t.shape() {
        return Err(Error::shape(y_t.shape(), y_s.shape()));
    }
    if y_s.len() == 1 {
        let z = y_s.data()[0] as f64;
        let pt = sigmoid(y_t.data()[0] as f64);
        let loss = softplus(z) - pt * z;
        let g = (sigmoid(z) - pt) as f32;
        return Ok((loss, Tensor::from_parts(y_s.shape().to_vec(), vec![g])));
    }
    soft_cross_entropy(y_s, &softmax_rows(y_t)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub distill: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.task + self.distill
    }
}

/// `L(y_S, y*) + λ‖αD′_S − D′_T‖²`; the task term is dropped without labels.
pub fn back_distill_loss(
    y_s: &Tensor,
    target: Option<&Target>,
    d_s: &Tensor,
    d_t: &Tensor,
    alpha: f64,
    lambda: f64,
) -> Result<LossParts> {
    let task = match target {
        Some(t) => task_loss(y_s, t)?.0,
        None => 0.0,
    };
    Ok(LossParts {
        task,
        distill: distill_loss(d_s, d_t, alpha, lambda)?,
    })
}

/// Reverse-mode pass over a cached forward path, collecting parameter
/// gradients for segments accepted by `trainable`. Stops once no trainable
/// segment remains upstream. Also returns the gradient at the point where it stopped.
pub(crate) fn backprop(
    path: &PseudoPath<'_>,
    caches: &PathCaches,
    g_out: Tensor,
    trainable: impl Fn(Role) -> bool,
) -> Result<(Vec<ModuleGrads>, Tensor)> {
    let mut grads: Vec<ModuleGrads> = path
        .segments
        .iter()
        .map(|s| ModuleGrads::empty(s.layers.len()))
        .collect();
    let lowest = match path.segments.iter().position(|s| trainable(s.role)) {
        Some(i) => i,
        None => return Ok((grads, g_out)),
    };
    let mut g = g_out;
    for si in (lowest..path.segments.len()).rev() {
        let seg = &path.segments[si];
        let train = trainable(seg.role);
        for li in (0..seg.layers.len()).rev() {
            let input = caches.inputs[si].get(li);
            let (gi, params) = layers::vjp(
                &seg.layers[li],
                &g,
                if train { input } else { None },
                &caches.segments[si].layers[li],
            )?;
            if let (true, Some((gw, gb))) = (train, params) {
                grads[si].accumulate(li, crate::net::ConvGrad { weights: gw, bias: gb });
            }
            g = gi;
        }
    }
    Ok((grads, g))
}

/// One adapter-learning problem: frozen student task module, optional
/// teacher task module, and the adapter under training.
#[derive(Clone, Copy, Debug)]
pub struct AdapterProblem<'a> {
    pub adapter: &'a NetModule,
    pub student_task: &'a NetModule,
    pub teacher_task: Option<&'a NetModule>,
    /// Shape of the category-module output feeding the adapter.
    pub feature_shape: &'a [usize],
    pub pseudo: &'a PseudoGradConfig,
}

/// Pseudo-gradients of the teacher and of the student task module for one
/// image id; both are constant during adapter training.
#[derive(Clone, Debug)]
pub struct PseudoTargets {
    pub id: u64,
    pub d_t: Tensor,
    /// Pseudo-gradient at the student task-module input.
    pub d_g: Tensor,
}

impl<'a> AdapterProblem<'a> {
    pub fn kind(&self) -> TaskKind {
        self.student_task.task_kind()
    }

    pub fn student_path(&self) -> PseudoPath<'a> {
        PseudoPath::new(self.feature_shape)
            .then(&self.adapter.layers, Role::Adapter)
            .then(&self.student_task.layers, Role::Task)
    }

    fn adapter_path(&self) -> PseudoPath<'a> {
        PseudoPath::new(self.feature_shape).then(&self.adapter.layers, Role::Adapter)
    }

    fn teacher(&self) -> Result<&'a NetModule> {
        self.teacher_task
            .ok_or_else(|| Error::InvalidSetup("method needs a teacher task module".into()))
    }

    fn teacher_path(&self) -> Result<PseudoPath<'a>> {
        Ok(PseudoPath::new(self.feature_shape).then(&self.teacher()?.layers, Role::Task))
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.student_path().output_shape()
    }

    pub fn pseudo_targets(&self, id: u64) -> Result<PseudoTargets> {
        let out = self.output_shape()?;
        let gy = sample_gy(self.pseudo, id, &out)?;
        let (d_t, _) = pseudo_backward(&self.teacher_path()?, &gy, self.pseudo, id, None)?;
        let mid = self.adapter.output_shape(self.feature_shape)?;
        let task_only = PseudoPath::new(&mid).then(&self.student_task.layers, Role::Task);
        let (d_g, _) = pseudo_backward(&task_only, &gy, self.pseudo, id, None)?;
        Ok(PseudoTargets { id, d_t, d_g })
    }

    /// `D′_S` from precomputed task-module pseudo-gradients.
    pub fn student_pseudo(&self, t: &PseudoTargets) -> Result<Tensor> {
        Ok(pseudo_backward(&self.adapter_path(), &t.d_g, self.pseudo, t.id, None)?.0)
    }

    /// Full `(D′_S, D′_T)` pair, walking the whole student path.
    pub fn pseudo_pair(&self, id: u64) -> Result<(Tensor, Tensor)> {
        let out = self.output_shape()?;
        let gy = sample_gy(self.pseudo, id, &out)?;
        let (d_s, _) = pseudo_backward(&self.student_path(), &gy, self.pseudo, id, None)?;
        let (d_t, _) = pseudo_backward(&self.teacher_path()?, &gy, self.pseudo, id, None)?;
        Ok((d_s, d_t))
    }

    /// Distillation term and its adapter gradient for one id.
    pub fn back_distill_term(&self, t: &PseudoTargets, alpha: f64, lambda: f64) -> Result<(f64, ModuleGrads)> {
        let path = self.adapter_path();
        let (d_s, tape) = pseudo_backward(&path, &t.d_g, self.pseudo, t.id, None)?;
        let loss = distill_loss(&d_s, &t.d_t, alpha, lambda)?;
        let mut g = distill_grad(&tape, &path, &d_s, &t.d_t, alpha, lambda)?;
        Ok((loss, g.swap_remove(0)))
    }

    /// Student output for a category-module feature map.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.student_path().forward(features, None)
    }

    fn forward_cached(&self, features: &Tensor) -> Result<(Tensor, PathCaches)> {
        let mut caches = PathCaches::default();
        let y = self.student_path().forward(features, Some(&mut caches))?;
        Ok((y, caches))
    }

    fn adapter_grad_from_output(&self, caches: &PathCaches, g_out: Tensor) -> Result<ModuleGrads> {
        let (mut g, _) = backprop(&self.student_path(), caches, g_out, |r| r == Role::Adapter)?;
        Ok(g.swap_remove(0))
    }

    /// Task loss and adapter gradient (direct-learn).
    pub fn task_term(&self, features: &Tensor, target: &Target) -> Result<(f64, ModuleGrads)> {
        let (y, caches) = self.forward_cached(features)?;
        let (loss, g) = task_loss(&y, target)?;
        Ok((loss, self.adapter_grad_from_output(&caches, g)?))
    }

    /// `CrossEntropy(y_S, y_T)` and its adapter gradient.
    pub fn output_distill_term(&self, features: &Tensor) -> Result<(f64, ModuleGrads)> {
        let y_t = PseudoPath::new(self.feature_shape)
            .then(&self.teacher()?.layers, Role::Task)
            .forward(features, None)?;
        let (y, caches) = self.forward_cached(features)?;
        let (loss, g) = output_distill_loss(&y, &y_t)?;
        Ok((loss, self.adapter_grad_from_output(&caches, g)?))
    }

    /// Real gradients `(D_S, D_T)` of `⟨G_y, y⟩` w.r.t. the feature map.
    pub fn real_pair(&self, features: &Tensor, id: u64) -> Result<(Tensor, Tensor, PathCaches)> {
        let out = self.output_shape()?;
        let gy = sample_gy(self.pseudo, id, &out)?;
        let (_, s_caches) = self.forward_cached(features)?;
        let d_s = real_backward(&self.student_path(), &gy, &s_caches)?;
        let tp = self.teacher_path()?;
        let mut t_caches = PathCaches::default();
        tp.forward(features, Some(&mut t_caches))?;
        let d_t = real_backward(&tp, &gy, &t_caches)?;
        Ok((d_s, d_t, s_caches))
    }

    /// Jacobian distillation: `λ‖D_S − D_T‖²` on real gradients, no magnitude balancing.
    pub fn jacobian_term(&self, features: &Tensor, id: u64, lambda: f64) -> Result<(f64, ModuleGrads)> {
        let (d_s, d_t, caches) = self.real_pair(features, id)?;
        let loss = distill_loss(&d_s, &d_t, 1.0, lambda)?;
        let out = self.output_shape()?;
        let gy = sample_gy(self.pseudo, id, &out)?;
        let real_cfg = PseudoGradConfig {
            task_relu: crate::pseudograd::ReluPlan::RealMask,
            adapter_relu: crate::pseudograd::ReluPlan::RealMask,
            substitute_pooling: false,
            skip_dropout: false,
            ..self.pseudo.clone()
        };
        let path = self.student_path();
        let (d_s2, tape) = pseudo_backward(&path, &gy, &real_cfg, id, Some(&caches))?;
        let mut g = distill_grad(&tape, &path, &d_s2, &d_t, 1.0, lambda)?;
        Ok((loss, g.swap_remove(0)))
    }
}

/// One labeled example with its frozen category-module features.
#[derive(Clone, Debug)]
pub struct FeatureSample {
    pub id: u64,
    pub features: Tensor,
    pub target: Target,
}

pub fn featurize(category: &NetModule, samples: &[Sample], kind: TaskKind, output_shape: &[usize]) -> Result<Vec<FeatureSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(FeatureSample {
                id: s.id,
                features: category.forward(&s.image)?,
                target: Target::for_sample(kind, s, output_shape)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub alpha: f64,
    pub eval_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub method: Method,
    pub samples: usize,
    pub lambda: f64,
    pub e_t: f64,
    pub rows: Vec<EpochRow>,
    pub metric_name: String,
    pub initial_metric: f64,
    pub final_metric: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,task_loss,distill_loss,alpha,eval_metric";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9}",
                r.epoch, r.task_loss, r.distill_loss, r.alpha, r.eval_metric
            );
        }
        s
    }
}

/// Metric of the student over evaluation samples.
pub fn evaluate_features(problem: &AdapterProblem<'_>, eval: &[FeatureSample]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    let outs: Vec<Tensor> = eval.par_iter().map(|s| problem.forward(&s.features)).collect::<Result<_>>()?;
    match problem.kind() {
        TaskKind::Classification => {
            let probs: Vec<f64> = outs.iter().map(|o| sigmoid(o.data()[0] as f64)).collect();
            let labels: Vec<u8> = eval
                .iter()
                .map(|s| match s.target {
                    Target::Label(l) => l,
                    Target::Mask(_) => 0,
                })
                .collect();
            error_rate(&probs, &labels)
        }
        TaskKind::Segmentation => {
            let truth: Vec<Tensor> = eval
                .iter()
                .map(|s| match &s.target {
                    Target::Mask(m) => Ok(m.clone()),
                    Target::Label(_) => Err(Error::InvalidSetup("segmentation eval needs masks".into())),
                })
                .collect::<Result<_>>()?;
            pixel_accuracy(&outs, &truth)
        }
    }
}

struct Momentum {
    velocity: Vec<f32>,
}

impl Momentum {
    fn step(&mut self, module: &mut NetModule, grad: &ModuleGrads, lr: f64, mu: f64) -> Result<()> {
        let g = grad.flatten_like(module);
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; g.len()];
        }
        let mut params = module.params_flat();
        for ((p, v), &gi) in params.iter_mut().zip(self.velocity.iter_mut()).zip(&g) {
            *v = (mu as f32) * *v - (lr as f32) * gi;
            *p += *v;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameter update"));
        }
        if module.frozen {
            return Err(Error::Frozen(module.id.clone()));
        }
        module.set_params_flat(&params)
    }
}

impl ModuleGrads {
    /// Flatten in the module's parameter order, zero-filling absent layers.
    pub fn flatten_like(&self, module: &NetModule) -> Vec<f32> {
        let mut out = Vec::with_capacity(module.param_count());
        for (l, g) in module.layers.iter().zip(&self.layers) {
            if let LayerSpec::Conv(c) = l {
                match g {
                    Some(g) => {
                        out.extend_from_slice(g.weights.data());
                        out.extend_from_slice(g.bias.data());
                    }
                    None => out.extend(std::iter::repeat_n(0.0, c.weights.len() + c.bias.len())),
                }
            }
        }
        out
    }
}

fn sum_grads(module: &NetModule, parts: Vec<ModuleGrads>, scale: f32) -> Result<ModuleGrads> {
    let mut acc = ModuleGrads::zeros_like(module)?;
    for g in &parts {
        acc.add_scaled(g, scale);
    }
    Ok(acc)
}

/// Everything adapter training needs besides the config.
pub struct AdapterJob<'a> {
    pub adapter: &'a mut NetModule,
    pub student_task: &'a NetModule,
    pub teacher_task: Option<&'a NetModule>,
    pub feature_shape: Vec<usize>,
    /// Labeled pool; the first `N` are used.
    pub train: &'a [FeatureSample],
    pub eval: &'a [FeatureSample],
    /// Adapter linking the reference category to the student task module,
    /// for `AlphaRule::Reference`. `None` stands for a native identity link.
    pub reference_link: Option<&'a NetModule>,
}

/// SGD with momentum over adapter parameters only.
pub fn train_adapter(job: AdapterJob<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if job.adapter.kind != ModuleKind::Adapter {
        return Err(Error::InvalidSetup(format!("`{}` is not an adapter", job.adapter.id)));
    }
    if !job.student_task.frozen || job.teacher_task.is_some_and(|t| !t.frozen) {
        return Err(Error::InvalidSetup("task modules must be frozen".into()));
    }
    let n = cfg.samples.resolve(job.train.len())?;
    let labeled = &job.train[..n];
    let uses_teacher = cfg.method != Method::DirectLearn;
    if uses_teacher && job.teacher_task.is_none() {
        return Err(Error::InvalidSetup(format!("{} needs a teacher", cfg.method.name())));
    }
    let kind = job.student_task.task_kind();
    let feature_shape = job.feature_shape.clone();
    let adapter = job.adapter;
    adapter.frozen = false;

    let ctx = Ctx {
        student_task: job.student_task,
        teacher_task: job.teacher_task,
        feature_shape: &feature_shape,
        pseudo: &cfg.pseudo,
    };

    // fixed per-id pseudo targets and the λ / E_T scale
    let pool: Vec<PseudoTargets> = if cfg.method == Method::BackDistill {
        let p = ctx.problem(adapter);
        (0..cfg.distill_pool as u64)
            .into_par_iter()
            .map(|id| p.pseudo_targets(id))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let probe_n = cfg.probe_size.min(pool.len());
    let (lambda, e_t) = match cfg.method {
        Method::BackDistill => {
            let e_t = pool[..probe_n].iter().map(|t| t.d_t.mean_abs()).sum::<f64>() / probe_n as f64;
            (resolve_lambda(cfg.lambda, kind, e_t)?, e_t)
        }
        Method::JacobianDistill => {
            let p = ctx.problem(adapter);
            let k = cfg.probe_size.min(labeled.len()).max(1);
            let dts: Vec<f64> = labeled[..k.min(labeled.len())]
                .par_iter()
                .map(|s| p.real_pair(&s.features, s.id).map(|(_, d_t, _)| d_t.mean_abs()))
                .collect::<Result<_>>()?;
            let e_t = dts.iter().sum::<f64>() / dts.len() as f64;
            (resolve_lambda(cfg.lambda, kind, e_t)?, e_t)
        }
        _ => (0.0, 0.0),
    };

    let initial_metric = if job.eval.is_empty() {
        f64::NAN
    } else {
        evaluate_features(&ctx.problem(adapter), job.eval)?
    };

    // every method gets the same number of steps per epoch; small labeled
    // sets are cycled
    let label_batches = if labeled.is_empty() { 0 } else { labeled.len().div_ceil(cfg.batch_size) };
    let steps = cfg.distill_pool.div_ceil(cfg.batch_size).max(label_batches);

    let mut opt = Momentum { velocity: Vec::new() };
    let mut rows = Vec::with_capacity(cfg.epochs);
    let probe_alpha = |student_adapter: &NetModule| -> Result<f64> {
        let p = ctx.problem(student_adapter);
        let d_s: Vec<Tensor> = pool[..probe_n]
            .par_iter()
            .map(|t| p.student_pseudo(t))
            .collect::<Result<_>>()?;
        let d_t: Vec<Tensor> = pool[..probe_n].iter().map(|t| t.d_t.clone()).collect();
        estimate_alpha(&d_t, &d_s)
    };
    let reference_alpha = match (cfg.method, cfg.alpha, job.reference_link) {
        (Method::BackDistill, AlphaRule::Reference, Some(link)) => Some(probe_alpha(link)?),
        (Method::BackDistill, AlphaRule::Reference, None) => {
            let d_g: Vec<Tensor> = pool[..probe_n].iter().map(|t| t.d_g.clone()).collect();
            let d_t: Vec<Tensor> = pool[..probe_n].iter().map(|t| t.d_t.clone()).collect();
            Some(estimate_alpha(&d_t, &d_g)?)
        }
        _ => None,
    };
    let mut alpha = 1.0;
    for epoch in 0..cfg.epochs {
        if cfg.method == Method::BackDistill {
            alpha = match reference_alpha {
                Some(a) => a,
                None => probe_alpha(adapter)?,
            };
        }
        let lr = cfg.lr_at(epoch);
        let mut rng = Rng::keyed(cfg.seed, &[0x5348, epoch as u64]);
        let mut label_order: Vec<usize> = (0..labeled.len()).collect();
        rng.shuffle(&mut label_order);
        let mut pool_order: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut pool_order);

        let (mut task_sum, mut task_cnt, mut dist_sum, mut dist_cnt) = (0.0, 0usize, 0.0, 0usize);
        for step in 0..steps {
            let p = ctx.problem(adapter);
            let mut total = ModuleGrads::zeros_like(adapter)?;
            if !labeled.is_empty() {
                let idx: Vec<usize> = (0..cfg.batch_size.min(labeled.len()))
                    .map(|k| label_order[(step * cfg.batch_size + k) % labeled.len()])
                    .collect();
                let per: Vec<(f64, f64, ModuleGrads)> = idx
                    .par_iter()
                    .map(|&i| {
                        let s = &labeled[i];
                        let (tl, mut g) = p.task_term(&s.features, &s.target)?;
                        let mut dl = 0.0;
                        match cfg.method {
                            Method::OutputDistill => {
                                let (l, gd) = p.output_distill_term(&s.features)?;
                                dl = l;
                                g.add_scaled(&gd, 1.0);
                            }
                            Method::JacobianDistill => {
                                let (l, gd) = p.jacobian_term(&s.features, s.id, lambda)?;
                                dl = l;
                                g.add_scaled(&gd, 1.0);
                            }
                            _ => {}
                        }
                        Ok((tl, dl, g))
                    })
                    .collect::<Result<_>>()?;
                let b = per.len() as f32;
                for (tl, dl, _) in &per {
                    task_sum += tl;
                    task_cnt += 1;
                    if matches!(cfg.method, Method::OutputDistill | Method::JacobianDistill) {
                        dist_sum += dl;
                        dist_cnt += 1;
                    }
                }
                let g = sum_grads(adapter, per.into_iter().map(|(_, _, g)| g).collect(), 1.0 / b)?;
                total.add_scaled(&g, 1.0);
            }
            if !pool.is_empty() {
                let ids: Vec<usize> = (0..cfg.batch_size.min(pool.len()))
                    .map(|k| pool_order[(step * cfg.batch_size + k) % pool.len()])
                    .collect();
                let per: Vec<(f64, ModuleGrads)> = ids
                    .par_iter()
                    .map(|&i| p.back_distill_term(&pool[i], alpha, lambda))
                    .collect::<Result<_>>()?;
                let b = per.len() as f32;
                for (l, _) in &per {
                    dist_sum += l;
                    dist_cnt += 1;
                }
                let g = sum_grads(adapter, per.into_iter().map(|(_, g)| g).collect(), 1.0 / b)?;
                total.add_scaled(&g, 1.0);
            }
            if let Some(c) = cfg.grad_clip {
                let n = total.norm();
                if n > c {
                    total.scale((c / n) as f32);
                }
            }
            opt.step(adapter, &total, lr, cfg.momentum)?;
        }
        let eval_metric = if job.eval.is_empty() {
            f64::NAN
        } else {
            evaluate_features(&ctx.problem(adapter), job.eval)?
        };
        rows.push(EpochRow {
            epoch,
            task_loss: if task_cnt > 0 { task_sum / task_cnt as f64 } else { 0.0 },
            distill_loss: if dist_cnt > 0 { dist_sum / dist_cnt as f64 } else { 0.0 },
            alpha: if cfg.method == Method::BackDistill { alpha } else { 1.0 },
            eval_metric,
        });
    }
    adapter.frozen = true;
    let final_metric = rows.last().map(|r| r.eval_metric).unwrap_or(initial_metric);
    Ok(TrainReport {
        method: cfg.method,
        samples: n,
        lambda,
        e_t,
        rows,
        metric_name: match kind {
            TaskKind::Classification => "error_rate".into(),
            TaskKind::Segmentation => "pixel_accuracy".into(),
        },
        initial_metric,
        final_metric,
    })
}

fn resolve_lambda(rule: LambdaRule, kind: TaskKind, e_t: f64) -> Result<f64> {
    match rule {
        LambdaRule::Auto => lambda_rule(kind, e_t),
        LambdaRule::Fixed(l) => Ok(l),
    }
}

struct Ctx<'a> {
    student_task: &'a NetModule,
    teacher_task: Option<&'a NetModule>,
    feature_shape: &'a [usize],
    pseudo: &'a PseudoGradConfig,
}

impl<'a> Ctx<'a> {
    fn problem<'b>(&'b self, adapter: &'b NetModule) -> AdapterProblem<'b> {
        AdapterProblem {
            adapter,
            student_task: self.student_task,
            teacher_task: self.teacher_task,
            feature_shape: self.feature_shape,
            pseudo: self.pseudo,
        }
    }
}

/// Architecture of a pretrained teacher: one category module and its native task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSpec {
    pub category_id: String,
    pub channels: usize,
    pub hidden: usize,
    pub tasks: Vec<TaskKind>,
    /// Shared across teachers so their features start from a common base.
    pub init_seed: u64,
}

impl TeacherSpec {
    pub fn new(category_id: impl Into<String>, tasks: &[TaskKind]) -> Self {
        TeacherSpec {
            category_id: category_id.into(),
            channels: 8,
            hidden: 16,
            tasks: tasks.to_vec(),
            init_seed: 7,
        }
    }

    pub fn task_id(&self, kind: TaskKind) -> String {
        task_module_id(&self.category_id, kind)
    }
}

pub fn task_module_id(category: &str, kind: TaskKind) -> String {
    match kind {
        TaskKind::Classification => format!("{category}.cls"),
        TaskKind::Segmentation => format!("{category}.seg"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub category: NetModule,
    pub tasks: Vec<NetModule>,
}

impl Teacher {
    pub fn task(&self, kind: TaskKind) -> Option<&NetModule> {
        self.tasks.iter().find(|t| t.task_kind() == kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Minimum training accuracy for the teacher to count as usable.
    pub gate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            gate: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// `(epoch, mean loss)`.
    pub losses: Vec<(usize, f64)>,
    /// Training accuracy per task, in `TeacherSpec::tasks` order.
    pub accuracy: Vec<f64>,
    pub gate_passed: bool,
}

impl PretrainReport {
    /// The weak-teacher warning, if the gate failed.
    pub fn gate_error(&self, gate: f64) -> Option<Error> {
        let worst = self.accuracy.iter().copied().fold(f64::INFINITY, f64::min);
        (!self.gate_passed).then_some(Error::WeakTeacher { accuracy: worst, gate })
    }
}

/// Joint end-to-end training of a category module and its task heads.
pub fn pretrain_teacher(spec: &TeacherSpec, data: &[Sample], cfg: &PretrainConfig) -> Result<(Teacher, PretrainReport)> {
    if data.is_empty() {
        return Err(Error::InsufficientData { requested: 1, available: 0 });
    }
    if spec.tasks.is_empty() {
        return Err(Error::InvalidSetup("teacher needs at least one task".into()));
    }
    let mut rng = Rng::keyed(spec.init_seed, &[0x4341]);
    let mut category = crate::net::presets::category_module(&spec.category_id, spec.channels, &mut rng)?;
    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (i, &k) in spec.tasks.iter().enumerate() {
        let mut r = Rng::keyed(spec.init_seed, &[0x4844, i as u64]);
        let id = spec.task_id(k);
        tasks.push(match k {
            TaskKind::Classification => crate::net::presets::classification_head(&id, spec.channels, spec.hidden, &mut r)?,
            TaskKind::Segmentation => crate::net::presets::segmentation_head(&id, spec.channels, spec.hidden, &mut r)?,
        });
    }
    let report = fit(&mut category, true, &mut tasks, data, cfg)?;
    category.frozen = true;
    for t in &mut tasks {
        t.frozen = true;
    }
    Ok((Teacher { category, tasks }, report))
}

/// Supervised training of task heads over a frozen category module.
pub fn train_task_heads(category: &NetModule, tasks: &mut [NetModule], data: &[Sample], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::InsufficientData { requested: 1, available: 0 });
    }
    let mut f = category.clone();
    for t in tasks.iter_mut() {
        t.frozen = false;
    }
    let report = fit(&mut f, false, tasks, data, cfg)?;
    for t in tasks.iter_mut() {
        t.frozen = true;
    }
    Ok(report)
}

fn fit(
    category: &mut NetModule,
    train_category: bool,
    tasks: &mut [NetModule],
    data: &[Sample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let kinds: Vec<TaskKind> = tasks.iter().map(NetModule::task_kind).collect();
    let in_shape = data[0].image.shape().to_vec();
    let feat_shape = category.output_shape(&in_shape)?;
    let out_shapes: Vec<Vec<usize>> = tasks.iter().map(|t| t.output_shape(&feat_shape)).collect::<Result<_>>()?;
    let targets: Vec<Vec<Target>> = data
        .iter()
        .map(|s| {
            kinds
                .iter()
                .zip(&out_shapes)
                .map(|(&k, o)| Target::for_sample(k, s, o))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut opt_f = Momentum { velocity: Vec::new() };
    let frozen_feats: Option<Vec<Tensor>> = if train_category {
        None
    } else {
        Some(data.par_iter().map(|s| category.forward(&s.image)).collect::<Result<_>>()?)
    };
    let mut opt_g: Vec<Momentum> = tasks.iter().map(|_| Momentum { velocity: Vec::new() }).collect();
    let sched = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        ..TrainConfig::default()
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = sched.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::keyed(cfg.seed, &[0x5054, epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let per: Vec<(f64, ModuleGrads, Vec<ModuleGrads>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut gf = ModuleGrads::zeros_like(category)?;
                    let mut gts = Vec::with_capacity(tasks.len());
                    let mut loss = 0.0;
                    let f_path = PseudoPath::new(&in_shape).then(&category.layers, Role::Category);
                    let mut f_caches = PathCaches::default();
                    let feat = match &frozen_feats {
                        Some(fs) => fs[i].clone(),
                        None => f_path.forward(&data[i].image, Some(&mut f_caches))?,
                    };
                    let mut g_feat = Tensor::from_parts(feat.shape().to_vec(), vec![0.0; feat.len()]);
                    for (t, target) in tasks.iter().zip(&targets[i]) {
                        let path = PseudoPath::new(&feat_shape).then(&t.layers, Role::Task);
                        let mut caches = PathCaches::default();
                        let y = path.forward(&feat, Some(&mut caches))?;
                        let (l, g) = task_loss(&y, target)?;
                        loss += l;
                        let (mut grads, gi) = backprop(&path, &caches, g, |_| true)?;
                        gts.push(grads.pop().expect("task segment"));
                        g_feat.axpy(1.0, &gi);
                    }
                    if train_category {
                        let (grads, _) = backprop(&f_path, &f_caches, g_feat, |_| true)?;
                        gf = grads.into_iter().next().expect("category segment");
                    }
                    Ok((loss, gf, gts))
                })
                .collect::<Result<_>>()?;
            let b = 1.0 / per.len() as f32;
            let mut gf = ModuleGrads::zeros_like(category)?;
            let mut gts: Vec<ModuleGrads> = tasks.iter().map(ModuleGrads::zeros_like).collect::<Result<_>>()?;
            for (l, f, ts) in &per {
                epoch_loss += l;
                gf.add_scaled(f, b);
                for (acc, g) in gts.iter_mut().zip(ts) {
                    acc.add_scaled(g, b);
                }
            }
            if train_category {
                opt_f.step(category, &gf, lr, cfg.momentum)?;
            }
            for ((t, o), g) in tasks.iter_mut().zip(opt_g.iter_mut()).zip(&gts) {
                o.step(t, g, lr, cfg.momentum)?;
            }
        }
        losses.push((epoch, epoch_loss / data.len() as f64));
    }

    let feats: Vec<Tensor> = data.par_iter().map(|s| category.forward(&s.image)).collect::<Result<_>>()?;
    let mut accuracy = Vec::with_capacity(tasks.len());
    for (ti, t) in tasks.iter().enumerate() {
        let outs: Vec<Tensor> = feats.par_iter().map(|f| t.forward(f)).collect::<Result<_>>()?;
        let acc = match t.task_kind() {
            TaskKind::Classification => {
                let probs: Vec<f64> = outs.iter().map(|o| sigmoid(o.data()[0] as f64)).collect();
                let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
                1.0 - error_rate(&probs, &labels)?
            }
            TaskKind::Segmentation => {
                let truth: Vec<Tensor> = targets
                    .iter()
                    .map(|ts| match &ts[ti] {
                        Target::Mask(m) => m.clone(),
                        Target::Label(_) => unreachable!("segmentation targets are masks"),
                    })
                    .collect();
                pixel_accuracy(&outs, &truth)?
            }
        };
        accuracy.push(acc);
    }
    let gate_passed = accuracy.iter().all(|&a| a >= cfg.gate);
    Ok(PretrainReport {
        losses,
        accuracy,
        gate_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Family, SynthCategory};
    use crate::net::{build_adapter, presets, AdapterKernel, AdapterSpec};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn logistic_loss_and_gradient() {
        for (z, l) in [(0.7f32, 1u8), (-1.3, 0), (4.0, 0), (-20.0, 1)] {
            let (loss, g) = task_loss(&t(&[1, 1, 1], &[z]), &Target::Label(l)).unwrap();
            let zf = z as f64;
            let p = 1.0 / (1.0 + (-zf).exp());
            let want = if l == 1 { -p.ln() } else { -(1.0 - p).ln() };
            assert!((loss - want).abs() < 1e-9 * want.abs().max(1.0), "z {z}: {loss} vs {want}");
            assert!((g.data()[0] as f64 - (p - l as f64)).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_cross_entropy_gradient_matches_differences() {
        let mut rng = Rng::new(3, 0);
        let y = Tensor::uniform(&[2, 3, 2], -2.0, 2.0, &mut rng).unwrap();
        let mask = t(&[2, 3, 2], &[1., 0., 0., 1., 1., 0., 1., 0., 0., 1., 0., 1.]);
        let target = Target::Mask(mask);
        let (_, g) = task_loss(&y, &target).unwrap();
        let eps = 1e-2f32;
        for k in 0..y.len() {
            let mut p = y.clone();
            p.data_mut()[k] += eps;
            let mut m = y.clone();
            m.data_mut()[k] -= eps;
            let fd = (task_loss(&p, &target).unwrap().0 - task_loss(&m, &target).unwrap().0) / (2.0 * eps as f64);
            assert!((fd - g.data()[k] as f64).abs() < 1e-4, "k {k}: fd {fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn output_distill_is_stationary_at_teacher() {
        let mut rng = Rng::new(4, 0);
        for shape in [[1usize, 1, 1], [3, 3, 2]] {
            let y = Tensor::uniform(&shape, -3.0, 3.0, &mut rng).unwrap();
            let (_, g) = output_distill_loss(&y, &y).unwrap();
            assert!(g.data().iter().all(|v| v.abs() < 1e-6));
            let other = Tensor::uniform(&shape, -3.0, 3.0, &mut rng).unwrap();
            assert!(output_distill_loss(&other, &y).unwrap().1.mean_abs() > 1e-3);
        }
        assert!(output_distill_loss(&t(&[1, 1, 1], &[0.0]), &t(&[1, 1, 2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn alpha_is_ratio_of_mean_norms() {
        let dt = [Tensor::full(&[2, 2, 1], 2.0).unwrap(), Tensor::full(&[2, 2, 1], 4.0).unwrap()];
        let ds = [Tensor::full(&[2, 2, 1], 1.0).unwrap()];
        // mean ‖D′_T‖ = (4 + 8) / 2, ‖D′_S‖ = 2
        assert!((estimate_alpha(&dt, &ds).unwrap() - 3.0).abs() < 1e-12);
        assert!(estimate_alpha(&dt, &[Tensor::zeros(&[2, 2, 1]).unwrap()]).is_err());
        assert!(estimate_alpha(&[], &ds).is_err());
    }

    #[test]
    fn lambda_by_task() {
        assert_eq!(lambda_rule(TaskKind::Classification, 4.0).unwrap(), 2.5);
        assert_eq!(lambda_rule(TaskKind::Segmentation, 4.0).unwrap(), 0.25);
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(lambda_rule(TaskKind::Classification, bad).is_err());
        }
    }

    #[test]
    fn schedule_budget_and_validation() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(19), 0.1);
        assert!((cfg.lr_at(20) - 0.01).abs() < 1e-15);
        assert_eq!(SampleBudget::All.resolve(7).unwrap(), 7);
        assert!(matches!(
            SampleBudget::Count(8).resolve(7),
            Err(Error::InsufficientData { requested: 8, available: 7 })
        ));
        assert!(cfg.validate().is_ok());
        for m in [Method::DirectLearn, Method::OutputDistill, Method::JacobianDistill] {
            assert!(TrainConfig { method: m, ..cfg.clone() }.validate().is_err());
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { grad_clip: Some(0.0), ..cfg }.validate().is_err());
    }

    #[test]
    fn sgd_momentum_step() {
        let mut rng = Rng::new(5, 0);
        let mut a = build_adapter(
            "h",
            &AdapterSpec {
                channels: 2,
                convs: 1,
                kernel: AdapterKernel::Conv1x1,
                reorder_seed: None,
                beta: None,
                init_seed: 1,
            },
        )
        .unwrap();
        let p0 = a.params_flat();
        let g: Vec<f32> = (0..p0.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let grads = grads_from_flat(&a, &g);
        assert_eq!(grads.flatten_like(&a), g);
        let mut opt = Momentum { velocity: vec![] };
        opt.step(&mut a, &grads, 0.5, 0.9).unwrap();
        opt.step(&mut a, &grads, 0.5, 0.9).unwrap();
        // v1 = -0.5g, v2 = 0.9 v1 - 0.5g = -0.95g; p = p0 - 1.45g
        for ((p, p0), gi) in a.params_flat().iter().zip(&p0).zip(&g) {
            assert!((p - (p0 - 1.45 * gi)).abs() < 1e-5);
        }
        a.frozen = true;
        assert!(matches!(opt.step(&mut a, &grads, 0.5, 0.9), Err(Error::Frozen(_))));
    }

    fn grads_from_flat(module: &NetModule, flat: &[f32]) -> ModuleGrads {
        let mut g = ModuleGrads::empty(module.layers.len());
        let mut off = 0;
        for (i, l) in module.layers.iter().enumerate() {
            if let LayerSpec::Conv(c) = l {
                let (nw, nb) = (c.weights.len(), c.bias.len());
                g.accumulate(
                    i,
                    crate::net::ConvGrad {
                        weights: Tensor::from_vec(c.weights.shape(), flat[off..off + nw].to_vec()).unwrap(),
                        bias: Tensor::from_vec(c.bias.shape(), flat[off + nw..off + nw + nb].to_vec()).unwrap(),
                    },
                );
                off += nw + nb;
            }
        }
        g
    }

    struct Tiny {
        category: NetModule,
        task: NetModule,
        shape: Vec<usize>,
        train: Vec<FeatureSample>,
        eval: Vec<FeatureSample>,
    }

    fn tiny() -> Tiny {
        let mut rng = Rng::new(9, 0);
        let category = presets::category_module("c", 4, &mut rng).unwrap().frozen();
        let task = presets::classification_head("c.cls", 4, 4, &mut rng).unwrap().frozen();
        let shape = category.output_shape(&[28, 28, 1]).unwrap();
        let out = task.output_shape(&shape).unwrap();
        let cat = SynthCategory::new("c", Family::Ring);
        let fs = |n, seed| featurize(&category, &generate_dataset(&cat, n, seed).unwrap(), TaskKind::Classification, &out).unwrap();
        Tiny {
            train: fs(24, 1),
            eval: fs(16, 2),
            category,
            task,
            shape,
        }
    }

    fn run(tiny: &Tiny, cfg: &TrainConfig, adapter: &mut NetModule) -> Result<TrainReport> {
        train_adapter(
            AdapterJob {
                adapter,
                student_task: &tiny.task,
                teacher_task: Some(&tiny.task),
                feature_shape: tiny.shape.clone(),
                train: &tiny.train,
                eval: &tiny.eval,
                reference_link: None,
            },
            cfg,
        )
    }

    fn small_cfg(method: Method, n: usize) -> TrainConfig {
        TrainConfig {
            method,
            samples: SampleBudget::Count(n),
            epochs: 4,
            batch_size: 4,
            distill_pool: 8,
            probe_size: 4,
            seed: 2,
            ..TrainConfig::default()
        }
    }

    fn fresh_adapter() -> NetModule {
        build_adapter(
            "c->c.cls",
            &AdapterSpec {
                channels: 4,
                convs: 1,
                kernel: AdapterKernel::Conv3x3,
                reorder_seed: Some(3),
                beta: None,
                init_seed: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn every_method_trains_only_the_adapter_and_is_reproducible() {
        let tiny = tiny();
        let task_fp = tiny.task.fingerprint();
        for (m, n) in [
            (Method::BackDistill, 0),
            (Method::BackDistill, 8),
            (Method::DirectLearn, 8),
            (Method::OutputDistill, 8),
            (Method::JacobianDistill, 8),
        ] {
            let cfg = small_cfg(m, n);
            let mut a = fresh_adapter();
            let before = a.params_flat();
            let r1 = run(&tiny, &cfg, &mut a).unwrap();
            assert_ne!(a.params_flat(), before, "{}", m.name());
            assert_eq!(r1.rows.len(), 4);
            assert!(r1.to_csv().starts_with(TrainReport::CSV_HEADER));
            let mut b = fresh_adapter();
            let r2 = run(&tiny, &cfg, &mut b).unwrap();
            assert_eq!(r1.to_csv(), r2.to_csv());
            assert_eq!(a.fingerprint(), b.fingerprint());
            assert_eq!(tiny.task.fingerprint(), task_fp);
            if m == Method::BackDistill {
                assert!(r1.lambda > 0.0 && r1.e_t > 0.0);
            }
        }
    }

    #[test]
    fn alpha_rules() {
        let tiny = tiny();
        let alphas = |rule, link: Option<&NetModule>| -> Vec<f64> {
            let cfg = TrainConfig {
                alpha: rule,
                ..small_cfg(Method::BackDistill, 0)
            };
            let mut a = fresh_adapter();
            let job = AdapterJob {
                adapter: &mut a,
                student_task: &tiny.task,
                teacher_task: Some(&tiny.task),
                feature_shape: tiny.shape.clone(),
                train: &tiny.train,
                eval: &tiny.eval,
                reference_link: link,
            };
            train_adapter(job, &cfg).unwrap().rows.iter().map(|r| r.alpha).collect()
        };
        // g_S == g_T on a native link: the reference path is the teacher path
        assert!(alphas(AlphaRule::Reference, None).iter().all(|&a| a == 1.0));
        let moving = alphas(AlphaRule::Adapter, None);
        assert_ne!(moving[0], 1.0);
        assert_ne!(moving[0], moving[3]);
        // a reference link equal to the starting adapter pins α at its first value
        let link = fresh_adapter();
        assert!(alphas(AlphaRule::Reference, Some(&link)).iter().all(|&a| a == moving[0]));
    }

    #[test]
    fn direct_learning_reduces_task_loss() {
        let tiny = tiny();
        let cfg = TrainConfig {
            epochs: 12,
            ..small_cfg(Method::DirectLearn, 24)
        };
        let r = run(&tiny, &cfg, &mut fresh_adapter()).unwrap();
        assert!(r.rows.last().unwrap().task_loss < r.rows[0].task_loss);
    }

    #[test]
    fn setup_errors() {
        let tiny = tiny();
        let mut unfrozen = Tiny {
            task: NetModule {
                frozen: false,
                ..tiny.task.clone()
            },
            ..tiny
        };
        let cfg = small_cfg(Method::DirectLearn, 8);
        assert!(matches!(run(&unfrozen, &cfg, &mut fresh_adapter()), Err(Error::InvalidSetup(_))));
        unfrozen.task.frozen = true;
        let mut not_adapter = unfrozen.category.clone();
        assert!(run(&unfrozen, &cfg, &mut not_adapter).is_err());
        assert!(matches!(
            run(&unfrozen, &small_cfg(Method::DirectLearn, 25), &mut fresh_adapter()),
            Err(Error::InsufficientData { .. })
        ));
        let no_teacher = train_adapter(
            AdapterJob {
                adapter: &mut fresh_adapter(),
                student_task: &unfrozen.task,
                teacher_task: None,
                feature_shape: unfrozen.shape.clone(),
                train: &unfrozen.train,
                eval: &unfrozen.eval,
                reference_link: None,
            },
            &small_cfg(Method::BackDistill, 0),
        );
        assert!(matches!(no_teacher, Err(Error::InvalidSetup(_))));
    }

    #[test]
    fn weak_teacher_gate() {
        let data = generate_dataset(&SynthCategory::new("c", Family::Cross), 16, 1).unwrap();
        let spec = TeacherSpec {
            channels: 2,
            hidden: 2,
            ..TeacherSpec::new("c", &[TaskKind::Classification, TaskKind::Segmentation])
        };
        let cfg = PretrainConfig {
            epochs: 1,
            gate: 1.01,
            ..PretrainConfig::default()
        };
        let (teacher, report) = pretrain_teacher(&spec, &data, &cfg).unwrap();
        assert!(teacher.category.frozen && teacher.tasks.iter().all(|t| t.frozen));
        assert_eq!(teacher.task(TaskKind::Segmentation).unwrap().id, "c.seg");
        assert_eq!(report.accuracy.len(), 2);
        assert!(matches!(report.gate_error(cfg.gate), Some(Error::WeakTeacher { .. })));
        assert!(pretrain_teacher(&spec, &[], &cfg).is_err());
    }
}

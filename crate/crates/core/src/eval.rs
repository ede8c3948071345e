//! Classification error, pixel accuracy, and feature-space diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{downsample_mask, Sample};
use crate::error::{Error, Result};
use crate::layers::{self, LayerSpec};
use crate::net::{ComposedPath, TaskKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub count: usize,
    pub per_category: BTreeMap<String, f64>,
}

/// Fraction misclassified, thresholding probabilities at 0.5.
pub fn error_rate(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(&[labels.len()], &[predictions.len()]));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyEval);
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) != (l == 1))
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

fn argmax_pixels(t: &Tensor) -> Result<Vec<usize>> {
    let (_, _, c) = t.hwc()?;
    Ok(t.data()
        .chunks_exact(c)
        .map(|px| {
            px.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Correct pixels over total pixels, pooled over the whole set.
/// Predictions may be scores or one-hot maps; both are compared by argmax.
pub fn pixel_accuracy(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(&[truth.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(Error::shape(t.shape(), p.shape()));
        }
        let (a, b) = (argmax_pixels(p)?, argmax_pixels(t)?);
        correct += a.iter().zip(&b).filter(|(x, y)| x == y).count();
        total += a.len();
    }
    Ok(correct as f64 / total as f64)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Downsampling factor between a mask and a segmentation output.
pub(crate) fn mask_factor(mask: &Tensor, out: &Tensor) -> usize {
    mask.shape()[0] / out.shape()[0].max(1)
}

/// Classification error or pixel accuracy of one wired pair over `samples`.
pub fn evaluate_path(path: &ComposedPath<'_>, samples: &[Sample]) -> Result<EvalReport> {
    let kind = path.task.task_kind();
    let outputs: Vec<Tensor> = samples
        .par_iter()
        .map(|s| path.forward(&s.image))
        .collect::<Result<_>>()?;
    let key = format!("{}->{}", path.category.id, path.task.id);
    match kind {
        TaskKind::Classification => {
            let probs: Vec<f64> = outputs.iter().map(|o| sigmoid(o.data()[0] as f64)).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
            let v = error_rate(&probs, &labels)?;
            Ok(EvalReport {
                metric: "error_rate".into(),
                value: v,
                count: samples.len(),
                per_category: BTreeMap::from([(key, v)]),
            })
        }
        TaskKind::Segmentation => {
            let mut preds = Vec::new();
            let mut truth = Vec::new();
            for (o, s) in outputs.into_iter().zip(samples) {
                if let Some(m) = &s.mask {
                    truth.push(downsample_mask(m, mask_factor(m, &o))?);
                    preds.push(o);
                }
            }
            let v = pixel_accuracy(&preds, &truth)?;
            Ok(EvalReport {
                metric: "pixel_accuracy".into(),
                value: v,
                count: preds.len(),
                per_category: BTreeMap::from([(key, v)]),
            })
        }
    }
}

/// Pass-through statistics of one ReLU inside the task module.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStat {
    pub layer: usize,
    pub positive_fraction: f64,
    pub mean_magnitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    /// Final task features (input of the last conv), one row per image.
    pub features: Vec<Vec<f64>>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub variances: [f64; 2],
    pub projections: Vec<[f64; 2]>,
    pub layers: Vec<LayerStat>,
}

impl FeatureStats {
    /// Variance captured by the leading PC plane.
    pub fn plane_variance(&self) -> f64 {
        self.variances[0] + self.variances[1]
    }

    pub fn mean_positive_fraction(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.positive_fraction).sum::<f64>() / self.layers.len() as f64
    }

    pub fn projections_csv(&self) -> String {
        let mut s = String::from("image_id,pc1,pc2\n");
        for (i, p) in self.projections.iter().enumerate() {
            let _ = writeln!(s, "{i},{:.9},{:.9}", p[0], p[1]);
        }
        s
    }

    pub fn layers_csv(&self) -> String {
        let mut s = String::from("layer,positive_fraction,mean_magnitude\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{:.9},{:.9}", l.layer, l.positive_fraction, l.mean_magnitude);
        }
        s
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("features_pca.csv", self.projections_csv()), ("relu_stats.csv", self.layers_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

pub const POWER_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-8;

fn matvec(cov: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| cov[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration from a fixed start.
fn power_iteration(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 0.1).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = matvec(cov, d, &v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (v, 0.0);
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        lambda = norm;
        if delta < POWER_TOL {
            break;
        }
    }
    let rq = matvec(cov, d, &v).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (v, if rq.is_finite() { rq } else { lambda })
}

/// Two leading principal components of the rows of `features` (centered
/// covariance, power iteration with deflation).
pub fn principal_components(features: &[Vec<f64>]) -> Result<([Vec<f64>; 2], [f64; 2], Vec<[f64; 2]>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::EmptyEval);
    }
    let d = features[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![0f64; d * d];
    for r in &centered {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let (v1, l1) = power_iteration(&cov, d);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = power_iteration(&cov, d);
    let proj = centered
        .iter()
        .map(|r| {
            [
                r.iter().zip(&v1).map(|(a, b)| a * b).sum(),
                r.iter().zip(&v2).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(([v1, v2], [l1.max(0.0), l2.max(0.0)], proj))
}

/// Final-feature PCA and per-ReLU pass-through statistics inside the task module.
pub fn feature_stats(path: &ComposedPath<'_>, images: &[Tensor]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::EmptyEval);
    }
    let task_layers = &path.task.layers;
    let last_conv = task_layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv(_)))
        .ok_or(Error::UnsupportedLayer("task module without conv"))?;
    let relu_idx: Vec<usize> = task_layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Relu { .. }))
        .map(|(i, _)| i)
        .collect();

    let per_image: Vec<(Vec<f64>, Vec<(usize, usize, f64)>)> = images
        .par_iter()
        .map(|img| {
            let x = path.adapter.forward(&path.category.forward(img)?)?;
            let mut cur = x;
            let mut feat = Vec::new();
            let mut stats = Vec::new();
            for (i, l) in task_layers.iter().enumerate() {
                if i == last_conv {
                    feat = cur.data().iter().map(|&v| v as f64).collect();
                }
                if relu_idx.contains(&i) {
                    let pos = cur.data().iter().filter(|&&v| v > 0.0).count();
                    let mag = cur.data().iter().map(|&v| v.abs() as f64).sum::<f64>();
                    stats.push((pos, cur.len(), mag));
                }
                cur = layers::forward(l, &cur, None)?;
            }
            Ok((feat, stats))
        })
        .collect::<Result<_>>()?;

    let features: Vec<Vec<f64>> = per_image.iter().map(|(f, _)| f.clone()).collect();
    let (components, variances, projections) = principal_components(&features)?;
    let layers = relu_idx
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let (pos, tot, mag) = per_image
                .iter()
                .fold((0usize, 0usize, 0f64), |acc, (_, s)| (acc.0 + s[k].0, acc.1 + s[k].1, acc.2 + s[k].2));
            LayerStat {
                layer,
                positive_fraction: pos as f64 / tot as f64,
                mean_magnitude: mag / tot as f64,
            }
        })
        .collect();
    Ok(FeatureStats {
        features,
        components,
        variances,
        projections,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn error_rate_examples() {
        assert!((error_rate(&[1.0, 0.0, 1.0], &[1, 1, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(error_rate(&[0.9, 0.1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(error_rate(&[0.7; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(error_rate(&[], &[]), Err(Error::EmptyEval)));
    }

    fn onehot(bits: &[u8]) -> Tensor {
        let mut v = Vec::new();
        for &b in bits {
            v.extend_from_slice(if b == 1 { &[1.0, 0.0] } else { &[0.0, 1.0] });
        }
        Tensor::from_vec(&[1, bits.len(), 2], v).unwrap()
    }

    #[test]
    fn pixel_accuracy_examples() {
        let a = onehot(&[1, 0, 1, 0]);
        let b = onehot(&[0, 1, 0, 1]);
        let half = onehot(&[1, 1, 1, 1]);
        let one = std::slice::from_ref(&a);
        assert_eq!(pixel_accuracy(one, one).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(one, &[b]).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&[half], one).unwrap(), 0.5);
        let small = onehot(&[1]);
        assert!(matches!(pixel_accuracy(&[small], &[a]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pca_identical_rows_collapse_to_origin() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 5];
        let (_, var, proj) = principal_components(&rows).unwrap();
        assert_eq!(var, [0.0, 0.0]);
        assert!(proj.iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
    }

    #[test]
    fn pca_recovers_axes() {
        let rows = vec![vec![3.0, 0.0], vec![-3.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let (pcs, var, _) = principal_components(&rows).unwrap();
        assert!((pcs[0][0].abs() - 1.0).abs() < 1e-6 && pcs[0][1].abs() < 1e-6);
        assert!((pcs[1][1].abs() - 1.0).abs() < 1e-6 && pcs[1][0].abs() < 1e-6);
        assert!(var[0] > var[1]);
    }

    /// Dense symmetric eigen-solver (cyclic Jacobi) used only as an oracle.
    fn jacobi_eigenvalues(mut a: Vec<f64>, d: usize) -> Vec<f64> {
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..d {
                for q in p + 1..d {
                    off += a[p * d + q] * a[p * d + q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    let apq = a[p * d + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[k * d + p];
                        let akq = a[k * d + q];
                        a[k * d + p] = c * akp - s * akq;
                        a[k * d + q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[p * d + k];
                        let aqk = a[q * d + k];
                        a[p * d + k] = c * apk - s * aqk;
                        a[q * d + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    #[test]
    fn pca_variance_matches_dense_eigensolver() {
        let mut rng = Rng::new(99, 0);
        // anisotropic columns so the top eigenvalues are well separated
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..16).map(|j| rng.uniform_f64() * (16 - j) as f64).collect())
            .collect();
        let n = rows.len();
        let d = 16;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0f64; d * d];
        for r in &rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        let ev = jacobi_eigenvalues(cov, d);
        let (_, var, _) = principal_components(&rows).unwrap();
        assert!((var[0] - ev[0]).abs() <= 1e-4 * ev[0], "{} vs {}", var[0], ev[0]);
        assert!((var[1] - ev[1]).abs() <= 1e-4 * ev[1], "{} vs {}", var[1], ev[1]);
    }
}

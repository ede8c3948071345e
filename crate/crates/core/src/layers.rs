//! Layer kernels with three evaluation modes: forward, true vector-Jacobian
//! product, and the activation-agnostic pseudo-VJP.
//!
//! All feature maps are `H×W×C`. Convolutions are stride 1 with
//! `m = 2p + 1`, so spatial extents are preserved; pooling does the
//! downsampling.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// How a ReLU derivative is formed during a pseudo-backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReluMode {
    /// Pass the incoming gradient through unchanged.
    First,
    /// Mask the incoming gradient by `x_rand > 0`.
    Second,
    /// Mask by the cached forward pre-activation (the real derivative).
    RealMask,
}

impl ReluMode {
    pub fn to_u8(self) -> u8 {
        match self {
            ReluMode::First => 0,
            ReluMode::Second => 1,
            ReluMode::RealMask => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ReluMode::First),
            1 => Some(ReluMode::Second),
            2 => Some(ReluMode::RealMask),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `m×m×D×C`
    pub weights: Tensor,
    /// `C`
    pub bias: Tensor,
    pub padding: usize,
}

impl Conv {
    pub fn new(weights: Tensor, bias: Tensor, padding: usize) -> Result<Self> {
        let (m, m2, d, c) = kernel_dims(&weights)?;
        if m != m2 || m != 2 * padding + 1 {
            return Err(Error::InvalidParams(format!(
                "kernel {m}x{m2} with padding {padding}: need square m = 2p+1"
            )));
        }
        if bias.shape() != [c] {
            return Err(Error::shape(&[c], bias.shape()));
        }
        let _ = d;
        Ok(Conv {
            weights,
            bias,
            padding,
        })
    }
    /// He-uniform init in `±sqrt(6/(m²·D))`, zero bias.
    pub fn init(m: usize, d: usize, c: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_uniform(m, d, c, (6.0 / (m * m * d) as f32).sqrt(), rng)
    }

    /// Fan-in uniform init in `±1/sqrt(m²·D)`, zero bias. Used for adapters.
    pub fn init_fan_in(m: usize, d: usize, c: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_uniform(m, d, c, 1.0 / ((m * m * d) as f32).sqrt(), rng)
    }

    fn init_uniform(m: usize, d: usize, c: usize, bound: f32, rng: &mut Rng) -> Result<Self> {
        if m.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!("kernel size {m} must be odd")));
        }
        let weights = Tensor::uniform(&[m, m, d, c], -bound, bound, rng)?;
        Conv::new(weights, Tensor::zeros(&[c])?, m / 2)
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[3]
    }
}

fn kernel_dims(w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match w.shape()[..] {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(&[0, 0, 0, 0], w.shape())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv(Conv),
    Relu { mode: ReluMode },
    MaxPool { k: usize },
    AvgPool { k: usize },
    GlobalAvgPool,
    Dropout { rate: f32 },
    Reorder { perm: Vec<usize> },
    Rescale { beta: f32 },
}

impl LayerSpec {
    pub fn relu() -> Self {
        LayerSpec::Relu {
            mode: ReluMode::First,
        }
    }

    pub fn reorder(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidParams(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(LayerSpec::Reorder { perm })
    }

    pub fn rescale(beta: f32) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidScale(beta as f64));
        }
        Ok(LayerSpec::Rescale { beta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Reorder { .. } => "reorder",
            LayerSpec::Rescale { .. } => "rescale",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.weights.len() + c.bias.len(),
            _ => 0,
        }
    }

    /// Output shape for an `H×W×C` input, validating channel counts and pooling divisibility.
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let (h, w, c) = match in_shape[..] {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::shape(&[0, 0, 0], in_shape)),
        };
        match self {
            LayerSpec::Conv(conv) => {
                if conv.in_channels() != c {
                    return Err(Error::shape(&[h, w, conv.in_channels()], in_shape));
                }
                Ok(vec![h, w, conv.out_channels()])
            }
            LayerSpec::MaxPool { k } | LayerSpec::AvgPool { k } => {
                if *k == 0 || h % k != 0 || w % k != 0 {
                    return Err(Error::InvalidParams(format!(
                        "pool size {k} does not divide {h}x{w}"
                    )));
                }
                Ok(vec![h / k, w / k, c])
            }
            LayerSpec::GlobalAvgPool => Ok(vec![1, 1, c]),
            LayerSpec::Reorder { perm } => {
                if perm.len() != c {
                    return Err(Error::shape(&[h, w, perm.len()], in_shape));
                }
                Ok(in_shape.to_vec())
            }
            _ => Ok(in_shape.to_vec()),
        }
    }
}

/// Saved forward state for one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerCache {
    /// Layer needs nothing beyond its input shape.
    Shape(Vec<usize>),
    PreRelu(Tensor),
    MaxArg { in_shape: Vec<usize>, argmax: Vec<u32> },
    DropMask(Tensor),
}

impl LayerCache {
    pub fn in_shape(&self) -> &[usize] {
        match self {
            LayerCache::Shape(s) => s,
            LayerCache::PreRelu(t) | LayerCache::DropMask(t) => t.shape(),
            LayerCache::MaxArg { in_shape, .. } => in_shape,
        }
    }
}

/// Per-layer caches for a sequential pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
}

// ---------------------------------------------------------------------------
// convolution kernels

/// `y = x ⊗ w + b` with zero padding `p`, stride 1.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, p: usize) -> Result<Tensor> {
    let (h, wd, d) = x.hwc()?;
    let (m, _, kd, c) = kernel_dims(w)?;
    if kd != d {
        return Err(Error::shape(&[h, wd, kd], x.shape()));
    }
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0f32; h * wd * c];
    let mut acc = vec![0f64; c];
    for oy in 0..h {
        for ox in 0..wd {
            match bias {
                Some(b) => acc.iter_mut().zip(b.data()).for_each(|(a, &bv)| *a = bv as f64),
                None => acc.iter_mut().for_each(|a| *a = 0.0),
            }
            for i in 0..m {
                let iy = oy + i;
                if iy < p || iy - p >= h {
                    continue;
                }
                let iy = iy - p;
                for j in 0..m {
                    let ix = ox + j;
                    if ix < p || ix - p >= wd {
                        continue;
                    }
                    let ix = ix - p;
                    let xrow = &xs[(iy * wd + ix) * d..(iy * wd + ix + 1) * d];
                    let wbase = (i * m + j) * d * c;
                    for (dd, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let xv = xv as f64;
                        let wrow = &ws[wbase + dd * c..wbase + (dd + 1) * c];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv as f64;
                        }
                    }
                }
            }
            let o = &mut out[(oy * wd + ox) * c..(oy * wd + ox + 1) * c];
            for (ov, &a) in o.iter_mut().zip(&acc) {
                *ov = a as f32;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, wd, c], out))
}

/// Spatially reversed kernel with input/output channels swapped:
/// `W[i,j,k,l] = w[m-1-i, m-1-j, l, k]`.
pub fn flip_kernel(w: &Tensor) -> Result<Tensor> {
    let (m, m2, d, c) = kernel_dims(w)?;
    if m != m2 {
        return Err(Error::InvalidParams(format!("kernel {m}x{m2} is not square")));
    }
    let ws = w.data();
    let mut out = vec![0f32; ws.len()];
    for i in 0..m {
        for j in 0..m {
            for k in 0..c {
                for l in 0..d {
                    out[((i * m + j) * c + k) * d + l] =
                        ws[(((m - 1 - i) * m + (m - 1 - j)) * d + l) * c + k];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, m, c, d], out))
}

/// Gradient of `⟨gy, conv(x, w)⟩` w.r.t. `x`: `gy ⊗ flip(w)`.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, p: usize) -> Result<Tensor> {
    conv2d(gy, &flip_kernel(w)?, None, p)
}

/// Gradient of `⟨gy, conv(x, w)⟩` w.r.t. `w` (`m×m×D×C`).
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, m: usize, p: usize) -> Result<Tensor> {
    let (h, wd, d) = x.hwc()?;
    let (gh, gw, c) = gy.hwc()?;
    if (gh, gw) != (h, wd) {
        return Err(Error::shape(&[h, wd, c], gy.shape()));
    }
    let xs = x.data();
    let gs = gy.data();
    let mut acc = vec![0f64; m * m * d * c];
    for oy in 0..h {
        for ox in 0..wd {
            let grow = &gs[(oy * wd + ox) * c..(oy * wd + ox + 1) * c];
            if grow.iter().all(|&g| g == 0.0) {
                continue;
            }
            for i in 0..m {
                let iy = oy + i;
                if iy < p || iy - p >= h {
                    continue;
                }
                let iy = iy - p;
                for j in 0..m {
                    let ix = ox + j;
                    if ix < p || ix - p >= wd {
                        continue;
                    }
                    let ix = ix - p;
                    let xrow = &xs[(iy * wd + ix) * d..(iy * wd + ix + 1) * d];
                    let base = (i * m + j) * d * c;
                    for (dd, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let xv = xv as f64;
                        let arow = &mut acc[base + dd * c..base + (dd + 1) * c];
                        for (a, &g) in arow.iter_mut().zip(grow) {
                            *a += xv * g as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![m, m, d, c],
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

fn conv_bias_grad(gy: &Tensor) -> Result<Tensor> {
    let (_, _, c) = gy.hwc()?;
    let mut acc = vec![0f64; c];
    for row in gy.data().chunks_exact(c) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a += g as f64;
        }
    }
    Ok(Tensor::from_parts(vec![c], acc.into_iter().map(|v| v as f32).collect()))
}

// ---------------------------------------------------------------------------
// pooling and channel kernels

pub(crate) fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let (oh, ow) = (h / k, w / k);
    let xs = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0f64;
                for a in 0..k {
                    for b in 0..k {
                        s += xs[((oy * k + a) * w + ox * k + b) * c + ch] as f64;
                    }
                }
                out[(oy * ow + ox) * c + ch] = (s * inv) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

/// Spread each output gradient uniformly over its `k×k` window.
pub(crate) fn avg_pool_grad(g: &Tensor, k: usize) -> Result<Tensor> {
    let (oh, ow, c) = g.hwc()?;
    let (h, w) = (oh * k, ow * k);
    let gs = g.data();
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let src = ((y / k) * ow + x / k) * c;
            let dst = (y * w + x) * c;
            for ch in 0..c {
                out[dst + ch] = gs[src + ch] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

fn max_pool(x: &Tensor, k: usize) -> Result<(Tensor, Vec<u32>)> {
    let (h, w, c) = x.hwc()?;
    let (oh, ow) = (h / k, w / k);
    let xs = x.data();
    let mut out = vec![0f32; oh * ow * c];
    let mut arg = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0usize;
                for a in 0..k {
                    for b in 0..k {
                        let idx = ((oy * k + a) * w + ox * k + b) * c + ch;
                        if xs[idx] > best {
                            best = xs[idx];
                            bi = idx;
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
                arg[(oy * ow + ox) * c + ch] = bi as u32;
            }
        }
    }
    Ok((Tensor::from_parts(vec![oh, ow, c], out), arg))
}

pub(crate) fn max_pool_grad(g: &Tensor, argmax: &[u32], in_shape: &[usize]) -> Tensor {
    let mut out = vec![0f32; in_shape.iter().product()];
    for (&gv, &a) in g.data().iter().zip(argmax) {
        out[a as usize] += gv;
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Gather-form of a max-pool gradient route (adjoint of [`max_pool_grad`]).
pub(crate) fn max_pool_gather(a: &Tensor, argmax: &[u32], out_shape: &[usize]) -> Tensor {
    let data = argmax.iter().map(|&i| a.data()[i as usize]).collect();
    Tensor::from_parts(out_shape.to_vec(), data)
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let mut acc = vec![0f64; c];
    for row in x.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    Ok(Tensor::from_parts(
        vec![1, 1, c],
        acc.into_iter().map(|v| (v * inv) as f32).collect(),
    ))
}

pub(crate) fn global_avg_pool_grad(g: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let (h, w, c) = match in_shape[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape(&[0, 0, 0], in_shape)),
    };
    if g.len() != c {
        return Err(Error::shape(&[1, 1, c], g.shape()));
    }
    let inv = 1.0 / (h * w) as f32;
    let mut out = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        out.extend(g.data().iter().map(|&v| v * inv));
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), out))
}

/// `y[.., c] = x[.., perm[c]]`
pub(crate) fn permute_channels(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&0);
    if c != perm.len() {
        return Err(Error::shape(&[perm.len()], &[c]));
    }
    let mut out = vec![0f32; x.len()];
    for (orow, irow) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for (o, &p) in orow.iter_mut().zip(perm) {
            *o = irow[p];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Inverse of [`permute_channels`]: `y[.., perm[c]] = x[.., c]`.
pub(crate) fn unpermute_channels(g: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let c = *g.shape().last().unwrap_or(&0);
    if c != perm.len() {
        return Err(Error::shape(&[perm.len()], &[c]));
    }
    let mut out = vec![0f32; g.len()];
    for (orow, grow) in out.chunks_exact_mut(c).zip(g.data().chunks_exact(c)) {
        for (&gv, &p) in grow.iter().zip(perm) {
            orow[p] = gv;
        }
    }
    Ok(Tensor::from_parts(g.shape().to_vec(), out))
}

fn relu_mask_from(pre: &Tensor) -> Tensor {
    Tensor::from_parts(
        pre.shape().to_vec(),
        pre.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    )
}

// ---------------------------------------------------------------------------
// forward / vjp / pseudo-vjp

/// Evaluation-mode forward pass; dropout is the identity.
pub fn forward(layer: &LayerSpec, x: &Tensor, cache: Option<&mut LayerCache>) -> Result<Tensor> {
    forward_with(layer, x, cache, None)
}

/// Forward pass; when `dropout_rng` is given, dropout layers sample a mask.
pub fn forward_with(
    layer: &LayerSpec,
    x: &Tensor,
    cache: Option<&mut LayerCache>,
    dropout_rng: Option<&mut Rng>,
) -> Result<Tensor> {
    layer.output_shape(x.shape())?;
    let (y, saved) = match layer {
        LayerSpec::Conv(c) => (
            conv2d(x, &c.weights, Some(&c.bias), c.padding)?,
            LayerCache::Shape(x.shape().to_vec()),
        ),
        LayerSpec::Relu { .. } => (
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.max(0.0)).collect(),
            ),
            LayerCache::PreRelu(x.clone()),
        ),
        LayerSpec::MaxPool { k } => {
            let (y, argmax) = max_pool(x, *k)?;
            (
                y,
                LayerCache::MaxArg {
                    in_shape: x.shape().to_vec(),
                    argmax,
                },
            )
        }
        LayerSpec::AvgPool { k } => (avg_pool(x, *k)?, LayerCache::Shape(x.shape().to_vec())),
        LayerSpec::GlobalAvgPool => (global_avg_pool(x)?, LayerCache::Shape(x.shape().to_vec())),
        LayerSpec::Dropout { rate } => match dropout_rng {
            Some(rng) => {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f32> = (0..x.len())
                    .map(|_| if rng.uniform_f64() < *rate as f64 { 0.0 } else { keep })
                    .collect();
                let mask = Tensor::from_parts(x.shape().to_vec(), mask);
                (x.mul(&mask)?, LayerCache::DropMask(mask))
            }
            None => (x.clone(), LayerCache::Shape(x.shape().to_vec())),
        },
        LayerSpec::Reorder { perm } => (
            permute_channels(x, perm)?,
            LayerCache::Shape(x.shape().to_vec()),
        ),
        LayerSpec::Rescale { beta } => (x.scale(*beta)?, LayerCache::Shape(x.shape().to_vec())),
    };
    if let Some(slot) = cache {
        *slot = saved;
    }
    Ok(y)
}

/// True reverse-mode gradients of `⟨grad_out, forward(x)⟩`.
///
/// Returns `(grad_in, (grad_weights, grad_bias))`, the latter only for conv layers.
pub fn vjp(
    layer: &LayerSpec,
    grad_out: &Tensor,
    input: Option<&Tensor>,
    cache: &LayerCache,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    match (layer, cache) {
        (LayerSpec::Conv(c), _) => {
            let gx = conv2d_input_grad(grad_out, &c.weights, c.padding)?;
            let params = match input {
                Some(x) => Some((
                    conv2d_weight_grad(x, grad_out, c.kernel_size(), c.padding)?,
                    conv_bias_grad(grad_out)?,
                )),
                None => None,
            };
            Ok((gx, params))
        }
        (LayerSpec::Relu { .. }, LayerCache::PreRelu(pre)) => {
            Ok((grad_out.mul(&relu_mask_from(pre))?, None))
        }
        (LayerSpec::MaxPool { .. }, LayerCache::MaxArg { in_shape, argmax }) => {
            Ok((max_pool_grad(grad_out, argmax, in_shape), None))
        }
        (LayerSpec::AvgPool { k }, _) => Ok((avg_pool_grad(grad_out, *k)?, None)),
        (LayerSpec::GlobalAvgPool, c) => Ok((global_avg_pool_grad(grad_out, c.in_shape())?, None)),
        (LayerSpec::Dropout { .. }, LayerCache::DropMask(mask)) => Ok((grad_out.mul(mask)?, None)),
        (LayerSpec::Dropout { .. }, LayerCache::Shape(_)) => Ok((grad_out.clone(), None)),
        (LayerSpec::Reorder { perm }, _) => Ok((unpermute_channels(grad_out, perm)?, None)),
        (LayerSpec::Rescale { beta }, _) => Ok((grad_out.scale(*beta)?, None)),
        _ => Err(Error::CacheRequired(0)),
    }
}

/// Per-layer knobs of a pseudo-backward step.
#[derive(Clone, Copy, Debug)]
pub struct PseudoStep<'a> {
    pub relu: ReluMode,
    pub xrand: Option<&'a Tensor>,
    /// Replace max-pool routing by the average-pool derivative.
    pub substitute_pooling: bool,
    /// Treat dropout as the identity.
    pub skip_dropout: bool,
    /// Only consulted by `RealMask`, unsubstituted max-pool and kept dropout.
    pub cache: Option<&'a LayerCache>,
}

impl Default for PseudoStep<'_> {
    fn default() -> Self {
        PseudoStep {
            relu: ReluMode::First,
            xrand: None,
            substitute_pooling: true,
            skip_dropout: true,
            cache: None,
        }
    }
}

/// The linear map a pseudo-backward step applied, kept for back-back-propagation.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum StepMap {
    Identity,
    /// `G_in = G_out ⊗ flip(w)`; keeps `G_out` for the kernel adjoint.
    ConvT { g_out: Tensor },
    Mask(Tensor),
    Scale(f32),
    Unpermute(Vec<usize>),
    AvgUp(usize),
    MaxRoute { argmax: Vec<u32>, in_shape: Vec<usize> },
    GapUp(Vec<usize>),
}

pub(crate) fn pseudo_step(
    layer: &LayerSpec,
    g: &Tensor,
    in_shape: &[usize],
    step: &PseudoStep<'_>,
) -> Result<(Tensor, StepMap)> {
    let expected = layer.output_shape(in_shape)?;
    if g.shape() != expected.as_slice() {
        return Err(Error::shape(&expected, g.shape()));
    }
    match layer {
        LayerSpec::Conv(c) => Ok((
            conv2d_input_grad(g, &c.weights, c.padding)?,
            StepMap::ConvT { g_out: g.clone() },
        )),
        LayerSpec::Relu { .. } => {
            let mask = match step.relu {
                ReluMode::First => return Ok((g.clone(), StepMap::Identity)),
                ReluMode::Second => {
                    let xr = step.xrand.ok_or(Error::MissingXRand)?;
                    if xr.shape() != g.shape() {
                        return Err(Error::shape(g.shape(), xr.shape()));
                    }
                    relu_mask_from(xr)
                }
                ReluMode::RealMask => match step.cache {
                    Some(LayerCache::PreRelu(pre)) => relu_mask_from(pre),
                    _ => return Err(Error::CacheRequired(0)),
                },
            };
            Ok((g.mul(&mask)?, StepMap::Mask(mask)))
        }
        LayerSpec::MaxPool { k } => {
            if step.substitute_pooling {
                Ok((avg_pool_grad(g, *k)?, StepMap::AvgUp(*k)))
            } else {
                match step.cache {
                    Some(LayerCache::MaxArg { in_shape, argmax }) => Ok((
                        max_pool_grad(g, argmax, in_shape),
                        StepMap::MaxRoute {
                            argmax: argmax.clone(),
                            in_shape: in_shape.clone(),
                        },
                    )),
                    _ => Err(Error::CacheRequired(0)),
                }
            }
        }
        LayerSpec::AvgPool { k } => Ok((avg_pool_grad(g, *k)?, StepMap::AvgUp(*k))),
        LayerSpec::GlobalAvgPool => Ok((
            global_avg_pool_grad(g, in_shape)?,
            StepMap::GapUp(in_shape.to_vec()),
        )),
        LayerSpec::Dropout { .. } => {
            if step.skip_dropout {
                return Ok((g.clone(), StepMap::Identity));
            }
            match step.cache {
                Some(LayerCache::DropMask(mask)) => Ok((g.mul(mask)?, StepMap::Mask(mask.clone()))),
                Some(LayerCache::Shape(_)) => Ok((g.clone(), StepMap::Identity)),
                _ => Err(Error::CacheRequired(0)),
            }
        }
        LayerSpec::Reorder { perm } => Ok((
            unpermute_channels(g, perm)?,
            StepMap::Unpermute(perm.clone()),
        )),
        LayerSpec::Rescale { beta } => Ok((g.scale(*beta)?, StepMap::Scale(*beta))),
    }
}

/// Pseudo-VJP of one layer. Never reads forward activations unless the step
/// explicitly disables a substitution (`RealMask`, unsubstituted pooling, kept dropout).
pub fn pseudo_vjp(
    layer: &LayerSpec,
    g: &Tensor,
    in_shape: &[usize],
    step: &PseudoStep<'_>,
) -> Result<Tensor> {
    pseudo_step(layer, g, in_shape, step).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, p: usize) -> Vec<f64> {
        let (h, wd, d) = x.hwc().unwrap();
        let m = w.shape()[0];
        let c = w.shape()[3];
        let mut out = vec![0f64; h * wd * c];
        for oy in 0..h as isize {
            for ox in 0..wd as isize {
                for oc in 0..c {
                    let mut s = b.data()[oc] as f64;
                    for i in 0..m as isize {
                        for j in 0..m as isize {
                            let iy = oy + i - p as isize;
                            let ix = ox + j - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for dd in 0..d {
                                let xv = x.data()[((iy as usize) * wd + ix as usize) * d + dd];
                                let wv = w.data()[(((i as usize) * m + j as usize) * d + dd) * c + oc];
                                s += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((oy as usize) * wd + ox as usize) * c + oc] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_1x1_single_element() {
        let conv = Conv::new(t(&[1, 1, 1, 1], vec![3.0]), t(&[1], vec![1.0]), 0).unwrap();
        let y = forward(&LayerSpec::Conv(conv), &t(&[1, 1, 1], vec![2.0]), None).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_forward() {
        let y = forward(&LayerSpec::relu(), &t(&[1, 1, 2], vec![-1.0, 2.0]), None).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn conv3x3_matches_sliding_window_oracle() {
        let mut rng = Rng::new(5, 0);
        let x = Tensor::uniform(&[8, 8, 2], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng).unwrap();
        let conv = Conv::new(w.clone(), b.clone(), 1).unwrap();
        let y = forward(&LayerSpec::Conv(conv), &x, None).unwrap();
        let oracle = naive_conv(&x, &w, &b, 1);
        assert_eq!(y.shape(), &[8, 8, 4]);
        for (a, e) in y.data().iter().zip(&oracle) {
            assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn conv_rejects_even_or_mismatched_padding() {
        let w = Tensor::zeros(&[3, 3, 1, 1]).unwrap();
        assert!(Conv::new(w.clone(), Tensor::zeros(&[1]).unwrap(), 0).is_err());
        assert!(Conv::new(w, Tensor::zeros(&[1]).unwrap(), 1).is_ok());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let conv = Conv::init(1, 3, 2, &mut Rng::new(1, 0)).unwrap();
        let err = forward(&LayerSpec::Conv(conv), &Tensor::zeros(&[2, 2, 2]).unwrap(), None);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_vjp_sign_mask() {
        let mut cache = LayerCache::Shape(vec![]);
        forward(&LayerSpec::relu(), &t(&[1, 1, 2], vec![-1.0, 2.0]), Some(&mut cache)).unwrap();
        let (g, _) = vjp(&LayerSpec::relu(), &t(&[1, 1, 2], vec![5.0, 5.0]), None, &cache).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_vjp_without_cache_fails() {
        let r = vjp(
            &LayerSpec::relu(),
            &t(&[1, 1, 1], vec![1.0]),
            None,
            &LayerCache::Shape(vec![1, 1, 1]),
        );
        assert!(matches!(r, Err(Error::CacheRequired(_))));
    }

    #[test]
    fn avg_pool_vjp_uniform_split() {
        let cache = LayerCache::Shape(vec![2, 2, 1]);
        let (g, _) = vjp(&LayerSpec::AvgPool { k: 2 }, &t(&[1, 1, 1], vec![1.0]), None, &cache).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn conv_vjp_matches_finite_differences() {
        // oracle: d/dθ ⟨G, forward(x)⟩ by central differences in f64 via the naive conv
        let mut rng = Rng::new(11, 0);
        let x = Tensor::uniform(&[5, 5, 2], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::uniform(&[3, 3, 2, 3], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng).unwrap();
        let g = Tensor::uniform(&[5, 5, 3], -1.0, 1.0, &mut rng).unwrap();
        let layer = LayerSpec::Conv(Conv::new(w.clone(), b.clone(), 1).unwrap());
        let mut cache = LayerCache::Shape(vec![]);
        forward(&layer, &x, Some(&mut cache)).unwrap();
        let (gx, params) = vjp(&layer, &g, Some(&x), &cache).unwrap();
        let (gw, gb) = params.unwrap();
        let objective = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            naive_conv(x, w, b, 1)
                .iter()
                .zip(g.data())
                .map(|(a, &gv)| a * gv as f64)
                .sum()
        };
        let eps = 1e-3f32;
        let rel = |a: f64, e: f64| (a - e).abs() / e.abs().max(1e-2);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b))
                / ((xp.data()[i] - xm.data()[i]) as f64);
            assert!(rel(gx.data()[i] as f64, fd) < 1e-4, "x[{i}]");
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b))
                / ((wp.data()[i] - wm.data()[i]) as f64);
            assert!(rel(gw.data()[i] as f64, fd) < 1e-4, "w[{i}]");
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp.data_mut()[i] += eps;
            let mut bm = b.clone();
            bm.data_mut()[i] -= eps;
            let fd = (objective(&x, &w, &bp) - objective(&x, &w, &bm))
                / ((bp.data()[i] - bm.data()[i]) as f64);
            assert!(rel(gb.data()[i] as f64, fd) < 1e-4, "b[{i}]");
        }
    }

    #[test]
    fn pseudo_relu_first_is_identity() {
        let g = t(&[1, 1, 2], vec![-3.0, 4.0]);
        let out = pseudo_vjp(&LayerSpec::relu(), &g, &[1, 1, 2], &PseudoStep::default()).unwrap();
        assert_eq!(out.data(), &[-3.0, 4.0]);
    }

    #[test]
    fn pseudo_relu_second_all_positive_passes() {
        let g = t(&[1, 2, 1], vec![-3.0, 4.0]);
        let xr = t(&[1, 2, 1], vec![1.0, 1.0]);
        let step = PseudoStep {
            relu: ReluMode::Second,
            xrand: Some(&xr),
            ..Default::default()
        };
        let out = pseudo_vjp(&LayerSpec::relu(), &g, &[1, 2, 1], &step).unwrap();
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn pseudo_relu_second_without_xrand_fails() {
        let g = t(&[1, 1, 1], vec![1.0]);
        let step = PseudoStep {
            relu: ReluMode::Second,
            ..Default::default()
        };
        let r = pseudo_vjp(&LayerSpec::relu(), &g, &[1, 1, 1], &step);
        assert!(matches!(r, Err(Error::MissingXRand)));
    }

    #[test]
    fn pseudo_maxpool_uses_average_derivative() {
        let g = t(&[1, 1, 1], vec![1.0]);
        let out = pseudo_vjp(&LayerSpec::MaxPool { k: 2 }, &g, &[2, 2, 1], &PseudoStep::default()).unwrap();
        assert_eq!(out.data(), &[0.25; 4]);
    }

    #[test]
    fn pseudo_dropout_and_rescale_and_reorder() {
        let g = t(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let s = PseudoStep::default();
        let d = pseudo_vjp(&LayerSpec::Dropout { rate: 0.5 }, &g, &[1, 1, 3], &s).unwrap();
        assert_eq!(d.data(), g.data());
        let r = pseudo_vjp(&LayerSpec::rescale(2.0).unwrap(), &g, &[1, 1, 3], &s).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 6.0]);
        let perm = LayerSpec::reorder(vec![2, 0, 1]).unwrap();
        let x = t(&[1, 1, 3], vec![10.0, 20.0, 30.0]);
        let y = forward(&perm, &x, None).unwrap();
        assert_eq!(y.data(), &[30.0, 10.0, 20.0]);
        // adjoint: ⟨g, Px⟩ == ⟨Pᵀg, x⟩
        let back = pseudo_vjp(&perm, &g, &[1, 1, 3], &s).unwrap();
        assert_eq!(g.dot(&y).unwrap(), back.dot(&x).unwrap());
    }

    #[test]
    fn flip_kernel_appendix_index_rule() {
        let mut rng = Rng::new(3, 0);
        let w = Tensor::uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut rng).unwrap();
        let f = flip_kernel(&w).unwrap();
        assert_eq!(f.shape(), &[3, 3, 4, 2]);
        let at = |t: &Tensor, i: usize, j: usize, k: usize, l: usize| {
            let s = t.shape();
            t.data()[((i * s[1] + j) * s[2] + k) * s[3] + l]
        };
        for k in 0..4 {
            for l in 0..2 {
                // 1-based W[1,1,k,l] == w[3,3,l,k]
                assert_eq!(at(&f, 0, 0, k, l), at(&w, 2, 2, l, k));
            }
        }
    }

    #[test]
    fn flip_kernel_1x1_is_transpose_and_involution() {
        let w = t(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = flip_kernel(&w).unwrap();
        assert_eq!(f.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(flip_kernel(&f).unwrap().bit_eq(&w));
    }

    #[test]
    fn reorder_rejects_non_bijection() {
        assert!(LayerSpec::reorder(vec![0, 0]).is_err());
        assert!(LayerSpec::reorder(vec![0, 2]).is_err());
        assert!(LayerSpec::rescale(0.0).is_err());
    }
}

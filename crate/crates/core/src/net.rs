//! Category modules, task modules and adapters, and the registry that wires
//! them into a transplant net.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{Conv, LayerSpec};
use crate::pseudograd::{PseudoPath, Role};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Category,
    Task,
    Adapter,
}

impl ModuleKind {
    pub fn to_u8(self) -> u8 {
        match self {
            ModuleKind::Category => 0,
            ModuleKind::Task => 1,
            ModuleKind::Adapter => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ModuleKind::Category),
            1 => Some(ModuleKind::Task),
            2 => Some(ModuleKind::Adapter),
            _ => None,
        }
    }
}

/// What a task module's output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Scalar logit (ends in a global average pool).
    Classification,
    /// Per-pixel class scores.
    Segmentation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetModule {
    pub id: String,
    pub kind: ModuleKind,
    pub layers: Vec<LayerSpec>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients for the conv layers of one module; `None` for parameter-free layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGrads {
    pub layers: Vec<Option<ConvGrad>>,
}

impl ModuleGrads {
    pub fn empty(n: usize) -> Self {
        ModuleGrads {
            layers: vec![None; n],
        }
    }

    pub fn zeros_like(module: &NetModule) -> Result<Self> {
        let layers = module
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(c) => Ok(Some(ConvGrad {
                    weights: Tensor::zeros(c.weights.shape())?,
                    bias: Tensor::zeros(c.bias.shape())?,
                })),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(ModuleGrads { layers })
    }

    pub fn accumulate(&mut self, layer: usize, g: ConvGrad) {
        match &mut self.layers[layer] {
            Some(acc) => {
                acc.weights.axpy(1.0, &g.weights);
                acc.bias.axpy(1.0, &g.bias);
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn add_scaled(&mut self, other: &ModuleGrads, s: f32) {
        for (i, o) in other.layers.iter().enumerate() {
            if let Some(o) = o {
                let scaled = ConvGrad {
                    weights: Tensor::from_parts(
                        o.weights.shape().to_vec(),
                        o.weights.data().iter().map(|v| v * s).collect(),
                    ),
                    bias: Tensor::from_parts(
                        o.bias.shape().to_vec(),
                        o.bias.data().iter().map(|v| v * s).collect(),
                    ),
                };
                self.accumulate(i, scaled);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.layers.iter_mut().flatten() {
            g.weights.data_mut().iter_mut().for_each(|v| *v *= s);
            g.bias.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flattened weights-then-bias view, layer by layer.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.extend_from_slice(g.weights.data());
            out.extend_from_slice(g.bias.data());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

impl NetModule {
    pub fn new(id: impl Into<String>, kind: ModuleKind, layers: Vec<LayerSpec>) -> Self {
        NetModule {
            id: id.into(),
            kind,
            layers,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = crate::layers::forward(l, &cur, None)?;
        }
        Ok(cur)
    }

    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let mut s = in_shape.to_vec();
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Trainable values in layer order, weights then bias.
    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let LayerSpec::Conv(c) = l {
                out.extend_from_slice(c.weights.data());
                out.extend_from_slice(c.bias.data());
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(&[self.param_count()], &[values.len()]));
        }
        let mut off = 0;
        for l in &mut self.layers {
            if let LayerSpec::Conv(c) = l {
                let n = c.weights.len();
                c.weights.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
                let n = c.bias.len();
                c.bias.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// `θ ← θ + step` per conv layer; frozen modules refuse.
    pub fn apply_delta(&mut self, delta: &ModuleGrads) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.id.clone()));
        }
        for (l, d) in self.layers.iter_mut().zip(&delta.layers) {
            if let (LayerSpec::Conv(c), Some(d)) = (l, d) {
                c.weights.axpy(1.0, &d.weights);
                c.bias.axpy(1.0, &d.bias);
            }
        }
        Ok(())
    }

    /// 64-bit FNV-1a over the bit patterns of every parameter and the layer layout.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.id.as_bytes());
        eat(&[self.kind.to_u8(), self.frozen as u8]);
        for l in &self.layers {
            eat(l.name().as_bytes());
            match l {
                LayerSpec::Conv(c) => {
                    for v in c.weights.data().iter().chain(c.bias.data()) {
                        eat(&v.to_bits().to_le_bytes());
                    }
                }
                LayerSpec::Reorder { perm } => {
                    for &p in perm {
                        eat(&(p as u64).to_le_bytes());
                    }
                }
                LayerSpec::Rescale { beta } => eat(&beta.to_bits().to_le_bytes()),
                LayerSpec::MaxPool { k } | LayerSpec::AvgPool { k } => eat(&(*k as u64).to_le_bytes()),
                LayerSpec::Dropout { rate } => eat(&rate.to_bits().to_le_bytes()),
                LayerSpec::Relu { mode } => eat(&[mode.to_u8()]),
                LayerSpec::GlobalAvgPool => {}
            }
        }
        h
    }

    pub fn task_kind(&self) -> TaskKind {
        if matches!(self.layers.last(), Some(LayerSpec::GlobalAvgPool)) {
            TaskKind::Classification
        } else {
            TaskKind::Segmentation
        }
    }

    /// Adapter with no layers: the native link between a pretrained category
    /// module and its own task module.
    pub fn identity_link(id: impl Into<String>) -> Self {
        NetModule::new(id, ModuleKind::Adapter, Vec::new()).frozen()
    }

    pub fn is_identity_link(&self) -> bool {
        self.kind == ModuleKind::Adapter && self.layers.is_empty()
    }

    /// The adapter's rescale factor, if it has a rescale layer.
    pub fn rescale_mut(&mut self) -> Option<&mut f32> {
        self.layers.iter_mut().find_map(|l| match l {
            LayerSpec::Rescale { beta } => Some(beta),
            _ => None,
        })
    }
}

/// Adapter kernel shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKernel {
    /// `3×3×M`, padding 1.
    Conv3x3,
    /// `1×1×M`, no padding.
    Conv1x1,
}

impl AdapterKernel {
    pub fn size(self) -> usize {
        match self {
            AdapterKernel::Conv3x3 => 3,
            AdapterKernel::Conv1x1 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub channels: usize,
    pub convs: usize,
    pub kernel: AdapterKernel,
    /// Seed for the channel shuffle; `None` keeps channel order.
    pub reorder_seed: Option<u64>,
    pub beta: Option<f32>,
    pub init_seed: u64,
}

/// `[Reorder, Rescale, (Conv, ReLU) × n]`, preserving `H×W×M`.
pub fn build_adapter(id: impl Into<String>, spec: &AdapterSpec) -> Result<NetModule> {
    let m = spec.channels;
    if m == 0 {
        return Err(Error::InvalidParams("adapter needs at least one channel".into()));
    }
    if !matches!(spec.convs, 1 | 3) {
        return Err(Error::InvalidParams(format!(
            "adapter conv count {} not in {{1, 3}}",
            spec.convs
        )));
    }
    let perm = match spec.reorder_seed {
        Some(seed) => Rng::keyed(seed, &[0x524f]).permutation(m),
        None => (0..m).collect(),
    };
    let mut layers = vec![
        LayerSpec::reorder(perm)?,
        LayerSpec::rescale(spec.beta.unwrap_or(1.0))?,
    ];
    let mut rng = Rng::keyed(spec.init_seed, &[0x4144]);
    for _ in 0..spec.convs {
        layers.push(LayerSpec::Conv(Conv::init_fan_in(spec.kernel.size(), m, m, &mut rng)?));
        layers.push(LayerSpec::relu());
    }
    Ok(NetModule::new(id, ModuleKind::Adapter, layers))
}

/// Layer presets for the desk-scale networks.
pub mod presets {
    use super::*;

    /// conv3×3 → ReLU → conv3×3 → ReLU → maxpool2: `H×W×1 → H/2×W/2×M`.
    pub fn category_module(id: &str, channels: usize, rng: &mut Rng) -> Result<NetModule> {
        Ok(NetModule::new(
            id,
            ModuleKind::Category,
            vec![
                LayerSpec::Conv(Conv::init(3, 1, channels, rng)?),
                LayerSpec::relu(),
                LayerSpec::Conv(Conv::init(3, channels, channels, rng)?),
                LayerSpec::relu(),
                LayerSpec::MaxPool { k: 2 },
            ],
        ))
    }

    /// Three-conv classification head ending in a 1-channel score map and a
    /// global average pool: `14×14×M → 7×7×1 → 1×1×1`.
    pub fn classification_head(id: &str, in_ch: usize, hidden: usize, rng: &mut Rng) -> Result<NetModule> {
        Ok(NetModule::new(
            id,
            ModuleKind::Task,
            vec![
                LayerSpec::Conv(Conv::init(3, in_ch, hidden, rng)?),
                LayerSpec::relu(),
                LayerSpec::MaxPool { k: 2 },
                LayerSpec::Conv(Conv::init(3, hidden, hidden, rng)?),
                LayerSpec::relu(),
                LayerSpec::Conv(Conv::init(1, hidden, 1, rng)?),
                LayerSpec::GlobalAvgPool,
            ],
        ))
    }

    /// Three-conv segmentation head producing 2-class scores at feature resolution.
    pub fn segmentation_head(id: &str, in_ch: usize, hidden: usize, rng: &mut Rng) -> Result<NetModule> {
        Ok(NetModule::new(
            id,
            ModuleKind::Task,
            vec![
                LayerSpec::Conv(Conv::init(3, in_ch, hidden, rng)?),
                LayerSpec::relu(),
                LayerSpec::Conv(Conv::init(3, hidden, hidden, rng)?),
                LayerSpec::relu(),
                LayerSpec::Conv(Conv::init(1, hidden, 2, rng)?),
            ],
        ))
    }
}

/// Borrowed `f → h → g` chain for one (category, task) pair.
#[derive(Clone, Copy, Debug)]
pub struct ComposedPath<'a> {
    pub category: &'a NetModule,
    pub adapter: &'a NetModule,
    pub task: &'a NetModule,
}

impl<'a> ComposedPath<'a> {
    pub fn layers(&self) -> impl Iterator<Item = &'a LayerSpec> {
        self.category
            .layers
            .iter()
            .chain(&self.adapter.layers)
            .chain(&self.task.layers)
    }

    pub fn layer_count(&self) -> usize {
        self.category.layers.len() + self.adapter.layers.len() + self.task.layers.len()
    }

    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.category.forward(image)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let x = self.category.forward(image)?;
        let h = self.adapter.forward(&x)?;
        self.task.forward(&h)
    }

    /// Adapter + task path starting at the category output.
    pub fn student_path(&self, feature_shape: &[usize]) -> PseudoPath<'a> {
        PseudoPath::new(feature_shape)
            .then(&self.adapter.layers, Role::Adapter)
            .then(&self.task.layers, Role::Task)
    }
}

/// Modular network: category modules, task modules, and one adapter per wired pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransplantNet {
    pub categories: BTreeMap<String, NetModule>,
    pub tasks: BTreeMap<String, NetModule>,
    pub adapters: BTreeMap<(String, String), NetModule>,
}

impl TransplantNet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_category(&mut self, m: NetModule) -> Result<()> {
        if self.categories.contains_key(&m.id) {
            return Err(Error::AlreadyExists(m.id));
        }
        let m = NetModule {
            kind: ModuleKind::Category,
            ..m
        };
        self.categories.insert(m.id.clone(), m);
        Ok(())
    }

    pub fn add_task(&mut self, m: NetModule) -> Result<()> {
        if self.tasks.contains_key(&m.id) {
            return Err(Error::AlreadyExists(m.id));
        }
        let m = NetModule {
            kind: ModuleKind::Task,
            ..m
        };
        self.tasks.insert(m.id.clone(), m);
        Ok(())
    }

    /// Wire an adapter between existing modules after checking channel compatibility.
    pub fn connect(&mut self, category: &str, task: &str, adapter: NetModule, input_hw: (usize, usize)) -> Result<()> {
        let cat = self
            .categories
            .get(category)
            .ok_or_else(|| Error::UnknownModule(category.to_string()))?;
        let tm = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::UnknownModule(task.to_string()))?;
        let key = (category.to_string(), task.to_string());
        if self.adapters.contains_key(&key) {
            return Err(Error::AlreadyConnected {
                category: category.into(),
                task: task.into(),
            });
        }
        let feat = cat.output_shape(&[input_hw.0, input_hw.1, 1])?;
        let mid = adapter.output_shape(&feat)?;
        tm.output_shape(&mid)?;
        let adapter = NetModule {
            kind: ModuleKind::Adapter,
            ..adapter
        };
        self.adapters.insert(key, adapter);
        Ok(())
    }

    pub fn compose_path(&self, category: &str, task: &str) -> Result<ComposedPath<'_>> {
        let not_connected = || Error::NotConnected {
            category: category.into(),
            task: task.into(),
        };
        let adapter = self
            .adapters
            .get(&(category.to_string(), task.to_string()))
            .ok_or_else(not_connected)?;
        let category_m = self.categories.get(category).ok_or_else(not_connected)?;
        let task_m = self.tasks.get(task).ok_or_else(not_connected)?;
        Ok(ComposedPath {
            category: category_m,
            adapter,
            task: task_m,
        })
    }

    pub fn adapter_mut(&mut self, category: &str, task: &str) -> Result<&mut NetModule> {
        self.adapters
            .get_mut(&(category.to_string(), task.to_string()))
            .ok_or_else(|| Error::NotConnected {
                category: category.into(),
                task: task.into(),
            })
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.adapters.keys().cloned().collect()
    }

    /// Every module, in file order: categories, tasks, adapters.
    pub fn modules(&self) -> impl Iterator<Item = &NetModule> {
        self.categories
            .values()
            .chain(self.tasks.values())
            .chain(self.adapters.values())
    }

    /// Fingerprint of every module keyed by a stable name.
    pub fn fingerprints(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (id, m) in &self.categories {
            out.insert(format!("category:{id}"), m.fingerprint());
        }
        for (id, m) in &self.tasks {
            out.insert(format!("task:{id}"), m.fingerprint());
        }
        for ((c, t), m) in &self.adapters {
            out.insert(format!("adapter:{c}->{t}"), m.fingerprint());
        }
        out
    }

    /// Registry check: every adapter's endpoints exist.
    pub fn check_consistency(&self) -> Result<()> {
        for (c, t) in self.adapters.keys() {
            if !self.categories.contains_key(c) {
                return Err(Error::UnknownModule(c.clone()));
            }
            if !self.tasks.contains_key(t) {
                return Err(Error::UnknownModule(t.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(convs: usize, kernel: AdapterKernel, reorder: Option<u64>) -> AdapterSpec {
        AdapterSpec {
            channels: 8,
            convs,
            kernel,
            reorder_seed: reorder,
            beta: None,
            init_seed: 1,
        }
    }

    #[test]
    fn adapter_layout_n1() {
        let a = build_adapter("h", &spec(1, AdapterKernel::Conv1x1, Some(3))).unwrap();
        let names: Vec<_> = a.layers.iter().map(LayerSpec::name).collect();
        assert_eq!(names, ["reorder", "rescale", "conv", "relu"]);
        let LayerSpec::Rescale { beta } = a.layers[1] else { panic!() };
        assert_eq!(beta, 1.0);
    }

    #[test]
    fn adapter_layout_n3_and_bad_n() {
        let a = build_adapter("h", &spec(3, AdapterKernel::Conv3x3, None)).unwrap();
        assert_eq!(a.layers.iter().filter(|l| matches!(l, LayerSpec::Conv(_))).count(), 3);
        assert_eq!(a.layers.len(), 8);
        assert!(build_adapter("h", &spec(2, AdapterKernel::Conv3x3, None)).is_err());
    }

    #[test]
    fn adapter_without_seed_is_identity_perm() {
        let a = build_adapter("h", &spec(1, AdapterKernel::Conv1x1, None)).unwrap();
        let LayerSpec::Reorder { perm } = &a.layers[0] else { panic!() };
        assert_eq!(perm, &(0..8).collect::<Vec<_>>());
    }

    #[test]
    fn adapter_init_bounds_and_spatial_neutrality() {
        for kernel in [AdapterKernel::Conv1x1, AdapterKernel::Conv3x3] {
            let a = build_adapter("h", &spec(3, kernel, Some(1))).unwrap();
            let m = kernel.size();
            let bound = 1.0 / ((m * m * 8) as f32).sqrt();
            for l in &a.layers {
                if let LayerSpec::Conv(c) = l {
                    assert!(c.weights.data().iter().all(|v| v.abs() <= bound));
                }
            }
            assert_eq!(a.output_shape(&[14, 14, 8]).unwrap(), vec![14, 14, 8]);
        }
    }

    fn small_net() -> TransplantNet {
        let mut rng = Rng::new(2, 0);
        let mut net = TransplantNet::new();
        net.add_category(presets::category_module("a", 4, &mut rng).unwrap().frozen()).unwrap();
        net.add_category(presets::category_module("b", 4, &mut rng).unwrap().frozen()).unwrap();
        net.add_task(presets::classification_head("cls", 4, 6, &mut rng).unwrap().frozen()).unwrap();
        net
    }

    #[test]
    fn compose_requires_adapter() {
        let mut net = small_net();
        assert!(matches!(net.compose_path("a", "cls"), Err(Error::NotConnected { .. })));
        let adapter = build_adapter("h", &AdapterSpec { channels: 4, ..spec(1, AdapterKernel::Conv1x1, None) }).unwrap();
        net.connect("a", "cls", adapter.clone(), (28, 28)).unwrap();
        let p = net.compose_path("a", "cls").unwrap();
        assert_eq!(p.layer_count(), 5 + 4 + 7);
        assert!(matches!(
            net.connect("a", "cls", adapter, (28, 28)),
            Err(Error::AlreadyConnected { .. })
        ));
    }

    #[test]
    fn composed_forward_is_associative() {
        let mut net = small_net();
        let adapter = build_adapter("h", &AdapterSpec { channels: 4, ..spec(1, AdapterKernel::Conv1x1, Some(5)) }).unwrap();
        net.connect("a", "cls", adapter, (28, 28)).unwrap();
        let p = net.compose_path("a", "cls").unwrap();
        let img = Tensor::uniform(&[28, 28, 1], 0.0, 1.0, &mut Rng::new(3, 0)).unwrap();
        let whole = p.forward(&img).unwrap();
        let staged = p.task.forward(&p.adapter.forward(&p.category.forward(&img).unwrap()).unwrap()).unwrap();
        assert!(whole.bit_eq(&staged));
    }

    #[test]
    fn shared_task_module_identity() {
        let mut net = small_net();
        let mk = |s| build_adapter("h", &AdapterSpec { channels: 4, init_seed: s, ..spec(1, AdapterKernel::Conv1x1, None) }).unwrap();
        net.connect("a", "cls", mk(1), (28, 28)).unwrap();
        net.connect("b", "cls", mk(2), (28, 28)).unwrap();
        let before = net.tasks["cls"].fingerprint();
        let delta = ModuleGrads::zeros_like(&net.adapters[&("a".into(), "cls".into())]).unwrap();
        net.adapter_mut("a", "cls").unwrap().apply_delta(&delta).unwrap();
        let pa = net.compose_path("a", "cls").unwrap();
        let pb = net.compose_path("b", "cls").unwrap();
        assert!(std::ptr::eq(pa.task, pb.task));
        assert_eq!(pa.task.fingerprint(), before);
    }

    #[test]
    fn frozen_module_rejects_update() {
        let net = small_net();
        let mut f = net.categories["a"].clone();
        let d = ModuleGrads::zeros_like(&f).unwrap();
        assert!(matches!(f.apply_delta(&d), Err(Error::Frozen(_))));
    }

    #[test]
    fn connect_checks_channels() {
        let mut net = small_net();
        let adapter = build_adapter("h", &spec(1, AdapterKernel::Conv1x1, None)).unwrap();
        assert!(net.connect("a", "cls", adapter, (28, 28)).is_err());
    }
}

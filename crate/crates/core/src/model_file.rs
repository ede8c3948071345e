//! Binary model files.
//!
//! Little-endian layout:
//!
//! ```text
//! "TPNT" | u32 version (=1) | u32 module count
//! per module: u16 id length, UTF-8 id, u8 kind, u8 frozen, u16 layer count
//!   per layer: u8 kind, then
//!     conv     u16 m, u16 D, u16 C, u16 p, f32 weights (m·m·D·C, row-major), f32 bias (C)
//!     relu     u8 pseudo mode
//!     maxpool  u16 k
//!     avgpool  u16 k
//!     gap      (nothing)
//!     dropout  f32 rate
//!     reorder  u16 length, u16 entries
//!     rescale  f32 beta
//! u32 pair count, then per adapter module (in file order) u16 category index, u16 task index
//! ```
//!
//! Module order in a net file is categories, tasks, adapters, each sorted by id.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Conv, LayerSpec, ReluMode};
use crate::net::{ModuleKind, NetModule, TransplantNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPNT";
pub const VERSION: u32 = 1;

const L_CONV: u8 = 0;
const L_RELU: u8 = 1;
const L_MAXPOOL: u8 = 2;
const L_AVGPOOL: u8 = 3;
const L_GAP: u8 = 4;
const L_DROPOUT: u8 = 5;
const L_REORDER: u8 = 6;
const L_RESCALE: u8 = 7;

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::InvalidParams(format!("{what} {v} exceeds u16")))
}

fn write_module(out: &mut Vec<u8>, m: &NetModule) -> Result<()> {
    let id = m.id.as_bytes();
    out.extend_from_slice(&u16_of(id.len(), "id length")?.to_le_bytes());
    out.extend_from_slice(id);
    out.push(m.kind.to_u8());
    out.push(m.frozen as u8);
    out.extend_from_slice(&u16_of(m.layers.len(), "layer count")?.to_le_bytes());
    for l in &m.layers {
        match l {
            LayerSpec::Conv(c) => {
                out.push(L_CONV);
                let s = c.weights.shape();
                for v in [s[0], s[2], s[3], c.padding] {
                    out.extend_from_slice(&u16_of(v, "conv dim")?.to_le_bytes());
                }
                for v in c.weights.data().iter().chain(c.bias.data()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            LayerSpec::Relu { mode } => {
                out.push(L_RELU);
                out.push(mode.to_u8());
            }
            LayerSpec::MaxPool { k } => {
                out.push(L_MAXPOOL);
                out.extend_from_slice(&u16_of(*k, "pool size")?.to_le_bytes());
            }
            LayerSpec::AvgPool { k } => {
                out.push(L_AVGPOOL);
                out.extend_from_slice(&u16_of(*k, "pool size")?.to_le_bytes());
            }
            LayerSpec::GlobalAvgPool => out.push(L_GAP),
            LayerSpec::Dropout { rate } => {
                out.push(L_DROPOUT);
                out.extend_from_slice(&rate.to_le_bytes());
            }
            LayerSpec::Reorder { perm } => {
                out.push(L_REORDER);
                out.extend_from_slice(&u16_of(perm.len(), "perm length")?.to_le_bytes());
                for &p in perm {
                    out.extend_from_slice(&u16_of(p, "perm entry")?.to_le_bytes());
                }
            }
            LayerSpec::Rescale { beta } => {
                out.push(L_RESCALE);
                out.extend_from_slice(&beta.to_le_bytes());
            }
        }
    }
    Ok(())
}

fn header(out: &mut Vec<u8>, count: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

pub fn net_to_bytes(net: &TransplantNet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let modules: Vec<&NetModule> = net.modules().collect();
    header(&mut out, modules.len());
    for m in &modules {
        write_module(&mut out, m)?;
    }
    let cat_ids: Vec<&String> = net.categories.keys().collect();
    let task_ids: Vec<&String> = net.tasks.keys().collect();
    out.extend_from_slice(&(net.adapters.len() as u32).to_le_bytes());
    for (c, t) in net.adapters.keys() {
        let ci = cat_ids.iter().position(|x| *x == c).ok_or_else(|| Error::UnknownModule(c.clone()))?;
        let ti = task_ids.iter().position(|x| *x == t).ok_or_else(|| Error::UnknownModule(t.clone()))?;
        out.extend_from_slice(&u16_of(ci, "category index")?.to_le_bytes());
        out.extend_from_slice(&u16_of(net.categories.len() + ti, "task index")?.to_le_bytes());
    }
    Ok(out)
}

pub fn module_to_bytes(m: &NetModule) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    header(&mut out, 1);
    write_module(&mut out, m)?;
    out.extend_from_slice(&0u32.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptModel(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptModel("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::CorruptModel(_) => e,
        other => Error::CorruptModel(other.to_string()),
    }
}

fn read_layer(r: &mut Reader<'_>) -> Result<LayerSpec> {
    let kind = r.u8()?;
    Ok(match kind {
        L_CONV => {
            let m = r.u16()? as usize;
            let d = r.u16()? as usize;
            let c = r.u16()? as usize;
            let p = r.u16()? as usize;
            let w = r.f32s(m * m * d * c)?;
            let b = r.f32s(c)?;
            let weights = Tensor::from_vec(&[m, m, d, c], w).map_err(corrupt)?;
            let bias = Tensor::from_vec(&[c], b).map_err(corrupt)?;
            LayerSpec::Conv(Conv::new(weights, bias, p).map_err(corrupt)?)
        }
        L_RELU => {
            let mode = r.u8()?;
            LayerSpec::Relu {
                mode: ReluMode::from_u8(mode)
                    .ok_or_else(|| Error::CorruptModel(format!("unknown relu mode {mode}")))?,
            }
        }
        L_MAXPOOL => LayerSpec::MaxPool { k: r.u16()? as usize },
        L_AVGPOOL => LayerSpec::AvgPool { k: r.u16()? as usize },
        L_GAP => LayerSpec::GlobalAvgPool,
        L_DROPOUT => LayerSpec::Dropout { rate: r.f32()? },
        L_REORDER => {
            let n = r.u16()? as usize;
            let perm = (0..n).map(|_| r.u16().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            LayerSpec::reorder(perm).map_err(corrupt)?
        }
        L_RESCALE => LayerSpec::rescale(r.f32()?).map_err(corrupt)?,
        other => return Err(Error::CorruptModel(format!("unknown layer kind {other}"))),
    })
}

fn read_module(r: &mut Reader<'_>) -> Result<NetModule> {
    let n = r.u16()? as usize;
    let id = std::str::from_utf8(r.take(n)?)
        .map_err(|e| Error::CorruptModel(format!("module id: {e}")))?
        .to_string();
    let kind = r.u8()?;
    let kind = ModuleKind::from_u8(kind).ok_or_else(|| Error::CorruptModel(format!("unknown module kind {kind}")))?;
    let frozen = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::CorruptModel(format!("frozen flag {v}"))),
    };
    let count = r.u16()? as usize;
    let layers = (0..count).map(|_| read_layer(r)).collect::<Result<Vec<_>>>()?;
    Ok(NetModule { id, kind, layers, frozen })
}

/// Parse the header and every module; returns modules plus raw wiring pairs.
fn parse(bytes: &[u8]) -> Result<(Vec<NetModule>, Vec<(usize, usize)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptModel("bad magic".into()));
    }
    let version = r.u32()?;
    if version == 0 || version > VERSION {
        return Err(Error::CorruptModel(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut modules = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        modules.push(read_module(&mut r)?);
    }
    let pairs = r.u32()? as usize;
    let mut wiring = Vec::with_capacity(pairs.min(1024));
    for _ in 0..pairs {
        wiring.push((r.u16()? as usize, r.u16()? as usize));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptModel(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((modules, wiring))
}

pub fn net_from_bytes(bytes: &[u8]) -> Result<TransplantNet> {
    let (modules, wiring) = parse(bytes)?;
    let adapters: Vec<&NetModule> = modules.iter().filter(|m| m.kind == ModuleKind::Adapter).collect();
    if adapters.len() != wiring.len() {
        return Err(Error::CorruptModel(format!(
            "{} adapters but {} wiring pairs",
            adapters.len(),
            wiring.len()
        )));
    }
    let mut net = TransplantNet::new();
    for m in &modules {
        let dup = match m.kind {
            ModuleKind::Category => net.categories.insert(m.id.clone(), m.clone()).is_some(),
            ModuleKind::Task => net.tasks.insert(m.id.clone(), m.clone()).is_some(),
            ModuleKind::Adapter => false,
        };
        if dup {
            return Err(Error::CorruptModel(format!("duplicate module id `{}`", m.id)));
        }
    }
    for (a, &(ci, ti)) in adapters.iter().zip(&wiring) {
        let endpoint = |i: usize, kind: ModuleKind| -> Result<String> {
            match modules.get(i) {
                Some(m) if m.kind == kind => Ok(m.id.clone()),
                _ => Err(Error::CorruptModel(format!("wiring index {i} is not a {kind:?} module"))),
            }
        };
        let key = (endpoint(ci, ModuleKind::Category)?, endpoint(ti, ModuleKind::Task)?);
        if net.adapters.insert(key, (*a).clone()).is_some() {
            return Err(Error::CorruptModel("pair wired twice".into()));
        }
    }
    Ok(net)
}

pub fn module_from_bytes(bytes: &[u8]) -> Result<NetModule> {
    let (mut modules, _) = parse(bytes)?;
    if modules.len() != 1 {
        return Err(Error::CorruptModel(format!("expected 1 module, found {}", modules.len())));
    }
    Ok(modules.remove(0))
}

pub fn save_net(net: &TransplantNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, net_to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_net(path: impl AsRef<Path>) -> Result<TransplantNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    net_from_bytes(&bytes)
}

pub fn save_module(m: &NetModule, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, module_to_bytes(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_module(path: impl AsRef<Path>) -> Result<NetModule> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    module_from_bytes(&bytes)
}

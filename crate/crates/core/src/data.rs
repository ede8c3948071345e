//! Deterministic synthetic category datasets and PGM import/export.
//!
//! Each category is a shape family with parameter ranges. Positives render
//! one anti-aliased shape over a noisy background; negatives are random
//! clutter or a shape of another family, with an all-background mask. Pixel values are quantised to
//! 8 bits so PGM export/import is lossless.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const CANVAS: usize = 28;
const SUPERSAMPLE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Ellipse,
    Cross,
    Ring,
    BarPair,
    Blob,
}

impl Family {
    pub fn all() -> [Family; 5] {
        [Family::Ellipse, Family::Cross, Family::Ring, Family::BarPair, Family::Blob]
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Ellipse => "ellipse",
            Family::Cross => "cross",
            Family::Ring => "ring",
            Family::BarPair => "bar-pair",
            Family::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Family::all().into_iter().find(|f| f.name() == s)
    }

    /// Rotation period of the shape; angles are reduced modulo this.
    fn period(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Family::Ellipse | Family::BarPair => PI,
            Family::Cross => PI / 2.0,
            Family::Ring => 2.0 * PI,
            Family::Blob => 2.0 * PI,
        }
    }

    /// Inside test in the shape's own frame, with unit `scale`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Family::Ellipse => u * u + (v / 0.6) * (v / 0.6) <= 1.0,
            Family::Cross => {
                let w = 0.225;
                (u.abs() <= 1.0 && v.abs() <= w) || (v.abs() <= 1.0 && u.abs() <= w)
            }
            Family::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            Family::BarPair => u.abs() <= 1.0 && ((v - 0.5).abs() <= 0.175 || (v + 0.5).abs() <= 0.175),
            Family::Blob => [(0.0f64, 0.5f64), (2.1, 0.5), (4.0, 0.5)].iter().any(|&(ang, d)| {
                let (cx, cy) = (d * ang.cos(), d * ang.sin());
                let (du, dv) = (u - cx, v - cy);
                du * du + dv * dv <= 0.55 * 0.55
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.uniform_f64()
    }

    pub fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRanges {
    pub cx: Range,
    pub cy: Range,
    pub scale: Range,
    pub rotation: Range,
    pub intensity: Range,
    pub noise: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            cx: Range::new(11.0, 17.0),
            cy: Range::new(11.0, 17.0),
            scale: Range::new(5.5, 9.0),
            rotation: Range::new(0.0, std::f64::consts::PI),
            intensity: Range::new(0.7, 1.0),
            noise: Range::new(0.0, 0.25),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCategory {
    pub id: String,
    pub family: Family,
    pub ranges: ParamRanges,
}

impl SynthCategory {
    pub fn new(id: impl Into<String>, family: Family) -> Self {
        SynthCategory {
            id: id.into(),
            family,
            ranges: ParamRanges::default(),
        }
    }

    /// Number of parameter ranges shared (overlapping) with `other`; two
    /// categories count as similar when they share at least two.
    pub fn shared_ranges(&self, other: &SynthCategory) -> usize {
        let (a, b) = (&self.ranges, &other.ranges);
        [
            a.cx.overlaps(&b.cx),
            a.cy.overlaps(&b.cy),
            a.scale.overlaps(&b.scale),
            a.rotation.overlaps(&b.rotation),
            a.intensity.overlaps(&b.intensity),
            a.noise.overlaps(&b.noise),
        ]
        .iter()
        .filter(|&&s| s)
        .count()
    }

    fn key(&self) -> u64 {
        self.id
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub rotation: f64,
    pub intensity: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `H×W×1` in `[0, 1]`.
    pub image: Tensor,
    pub label: u8,
    /// `H×W×2` one-hot, channel 0 foreground, channel 1 background.
    pub mask: Option<Tensor>,
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

fn mask_from_coverage(cov: &[f64], h: usize, w: usize) -> Tensor {
    let mut m = Vec::with_capacity(h * w * 2);
    for &c in cov {
        let fg = c > 0.5;
        m.push(if fg { 1.0 } else { 0.0 });
        m.push(if fg { 0.0 } else { 1.0 });
    }
    Tensor::from_parts(vec![h, w, 2], m)
}

/// Render one shape. Background noise is drawn from `noise_rng`.
pub fn render_sample(
    cat: &SynthCategory,
    params: &ShapeParams,
    canvas: (usize, usize),
    noise_rng: &mut Rng,
) -> Result<Sample> {
    let r = &cat.ranges;
    let checks = [
        ("cx", r.cx, params.cx),
        ("cy", r.cy, params.cy),
        ("scale", r.scale, params.scale),
        ("rotation", r.rotation, params.rotation),
        ("intensity", r.intensity, params.intensity),
        ("noise", r.noise, params.noise),
    ];
    for (name, range, v) in checks {
        if !range.contains(v) || !v.is_finite() {
            return Err(Error::InvalidParams(format!(
                "{name} = {v} outside [{}, {}]",
                range.lo, range.hi
            )));
        }
    }
    let (h, w) = canvas;
    let theta = params.rotation.rem_euclid(cat.family.period());
    let (s, c) = theta.sin_cos();
    let mut cov = vec![0f64; h * w];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - params.cx;
                    let py = y as f64 + (sy as f64 + 0.5) * step - params.cy;
                    let u = (c * px + s * py) / params.scale;
                    let v = (-s * px + c * py) / params.scale;
                    if cat.family.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            cov[y * w + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    let image: Vec<f32> = cov
        .iter()
        .map(|&a| {
            let bg = if params.noise > 0.0 {
                params.noise * noise_rng.uniform_f64()
            } else {
                0.0
            };
            quantize((1.0 - a) * bg + a * params.intensity)
        })
        .collect();
    Ok(Sample {
        id: 0,
        image: Tensor::from_parts(vec![h, w, 1], image),
        label: 1,
        mask: Some(mask_from_coverage(&cov, h, w)),
    })
}

fn sample_params(cat: &SynthCategory, rng: &mut Rng) -> ShapeParams {
    let r = &cat.ranges;
    ShapeParams {
        cx: r.cx.sample(rng),
        cy: r.cy.sample(rng),
        scale: r.scale.sample(rng),
        rotation: r.rotation.sample(rng),
        intensity: r.intensity.sample(rng),
        noise: r.noise.sample(rng),
    }
}

/// Random small discs and thick strokes over background noise; no foreground.
fn render_clutter(rng: &mut Rng, canvas: (usize, usize)) -> Sample {
    let (h, w) = canvas;
    let n = 3 + rng.below(4);
    let dots: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                2.0 + (w as f64 - 4.0) * rng.uniform_f64(),
                2.0 + (h as f64 - 4.0) * rng.uniform_f64(),
                1.0 + 1.2 * rng.uniform_f64(),
                0.5 + 0.5 * rng.uniform_f64(),
            )
        })
        .collect();
    // thick strokes share local edge structure with the shape families
    let strokes: Vec<(f64, f64, f64, f64, f64, f64)> = (0..2 + rng.below(3))
        .map(|_| {
            let (x0, y0) = (4.0 + (w as f64 - 8.0) * rng.uniform_f64(), 4.0 + (h as f64 - 8.0) * rng.uniform_f64());
            let ang = std::f64::consts::TAU * rng.uniform_f64();
            let len = 5.0 + 9.0 * rng.uniform_f64();
            let half = 0.6 + 0.8 * rng.uniform_f64();
            let a = 0.5 + 0.5 * rng.uniform_f64();
            (x0, y0, ang, len, half, a)
        })
        .collect();
    let noise = 0.25 * rng.uniform_f64();
    let mut img = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = noise * rng.uniform_f64();
            for &(cx, cy, r, a) in &dots {
                if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                    v = v.max(a);
                }
            }
            for &(x0, y0, ang, len, half, a) in &strokes {
                let (dx, dy) = (px - x0, py - y0);
                let along = dx * ang.cos() + dy * ang.sin();
                let across = -dx * ang.sin() + dy * ang.cos();
                if (0.0..=len).contains(&along) && across.abs() <= half {
                    v = v.max(a);
                }
            }
            img.push(quantize(v));
        }
    }
    let mut mask = Vec::with_capacity(h * w * 2);
    for _ in 0..h * w {
        mask.extend_from_slice(&[0.0, 1.0]);
    }
    Sample {
        id: 0,
        image: Tensor::from_parts(vec![h, w, 1], img),
        label: 0,
        mask: Some(Tensor::from_parts(vec![h, w, 2], mask)),
    }
}

/// A shape from another family, labelled negative with an all-background mask.
fn render_distractor(family: Family, rng: &mut Rng) -> Result<Sample> {
    let others: Vec<Family> = Family::all().into_iter().filter(|&f| f != family).collect();
    let other = SynthCategory::new("distractor", others[rng.below(others.len())]);
    let p = sample_params(&other, rng);
    let mut s = render_sample(&other, &p, (CANVAS, CANVAS), rng)?;
    s.label = 0;
    s.mask = Some(mask_from_coverage(&vec![0.0; CANVAS * CANVAS], CANVAS, CANVAS));
    Ok(s)
}

/// Balanced dataset: even indices are positives; odd indices are negatives,
/// half clutter and half shapes of other families.
/// Deterministic per `(category, seed)`; samples use independent streams.
pub fn generate_dataset(cat: &SynthCategory, count: usize, seed: u64) -> Result<Vec<Sample>> {
    if count < 2 || !count.is_multiple_of(2) {
        return Err(Error::InvalidParams(format!("count {count} must be even and >= 2")));
    }
    let key = cat.key();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::keyed(seed, &[0x5359, key, i as u64]);
            let mut s = if i % 2 == 0 {
                let p = sample_params(cat, &mut rng);
                render_sample(cat, &p, (CANVAS, CANVAS), &mut rng)?
            } else if rng.below(2) == 0 {
                render_distractor(cat.family, &mut rng)?
            } else {
                render_clutter(&mut rng, (CANVAS, CANVAS))
            };
            s.id = i as u64;
            Ok(s)
        })
        .collect()
}

/// Downsample a one-hot mask by `k` (foreground where at least half the window is).
pub fn downsample_mask(mask: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = mask.hwc()?;
    if c != 2 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(&[h - h % k, w - w % k, 2], mask.shape()));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(oh * ow * 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut fg = 0usize;
            for a in 0..k {
                for b in 0..k {
                    if mask.data()[((oy * k + a) * w + ox * k + b) * 2] > 0.5 {
                        fg += 1;
                    }
                }
            }
            let on = 2 * fg >= k * k;
            out.push(if on { 1.0 } else { 0.0 });
            out.push(if on { 0.0 } else { 1.0 });
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, 2], out))
}

// ---------------------------------------------------------------------------
// PGM

pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.hwc()?;
    if c != 1 {
        return Err(Error::shape(&[h, w, 1], t.shape()));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header number `{s}`"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let raster = bytes.get(data_start..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(format!("expected {} raster bytes, found {}", w * h, raster.len()));
    }
    let data = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
    Tensor::from_vec(&[h, w, 1], data).map_err(|e| e.to_string())
}

/// How labels are assigned when loading an image directory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelRule {
    /// Read `manifest.csv` (`file,label,mask_file`).
    Manifest,
    /// Every image gets this label.
    Constant(u8),
    /// Foreground present in the mask means positive; no mask means negative.
    FromMask,
}

/// Export as PGMs plus `manifest.csv`. Masks are stored as 0/255 foreground maps.
pub fn export_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("file,label,mask_file\n");
    for s in samples {
        let file = format!("img_{:05}.pgm", s.id);
        write_pgm(&dir.join(&file), &s.image)?;
        let mask_file = match &s.mask {
            Some(m) => {
                let name = format!("img_{:05}_mask.pgm", s.id);
                let (h, w, _) = m.hwc()?;
                let fg: Vec<f32> = m.data().iter().step_by(2).copied().collect();
                write_pgm(&dir.join(&name), &Tensor::from_parts(vec![h, w, 1], fg))?;
                name
            }
            None => String::new(),
        };
        manifest.push_str(&format!("{file},{},{mask_file}\n", s.label));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

fn load_mask(path: &Path) -> Result<Tensor> {
    let fg = read_pgm(path)?;
    let (h, w, _) = fg.hwc()?;
    let mut out = Vec::with_capacity(h * w * 2);
    for &v in fg.data() {
        let on = v > 0.5;
        out.push(if on { 1.0 } else { 0.0 });
        out.push(if on { 0.0 } else { 1.0 });
    }
    Ok(Tensor::from_parts(vec![h, w, 2], out))
}

/// Load every PGM image of a directory. Masks are sibling `<stem>_mask.pgm`
/// files (or named in the manifest); images without one are
/// classification-only.
pub fn load_image_dir(dir: &Path, rule: LabelRule) -> Result<Vec<Sample>> {
    let manifest = dir.join("manifest.csv");
    if rule == LabelRule::Manifest || (manifest.exists() && !matches!(rule, LabelRule::Constant(_))) {
        if manifest.exists() {
            return load_manifest(dir, &manifest);
        }
        if rule == LabelRule::Manifest {
            return Err(Error::io(&manifest, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "pgm")
                && !p.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("_mask"))
        })
        .collect();
    files.sort();
    files
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let image = read_pgm(p)?;
            let stem = p.file_stem().unwrap().to_string_lossy();
            let mp = p.with_file_name(format!("{stem}_mask.pgm"));
            let mask = if mp.exists() { Some(load_mask(&mp)?) } else { None };
            let label = match rule {
                LabelRule::Constant(l) => l,
                _ => match &mask {
                    Some(m) => m.data().iter().step_by(2).any(|&v| v > 0.5) as u8,
                    None => 0,
                },
            };
            Ok(Sample {
                id: i as u64,
                image,
                label,
                mask,
            })
        })
        .collect()
}

fn load_manifest(dir: &Path, manifest: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: manifest.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(parse_err(n + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let label: u8 = cols[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad label `{}`", cols[1])))?;
        let image = read_pgm(&dir.join(cols[0].trim()))?;
        let mask = match cols[2].trim() {
            "" => None,
            f => Some(load_mask(&dir.join(f))?),
        };
        let id = cols[0]
            .trim()
            .trim_start_matches("img_")
            .trim_end_matches(".pgm")
            .parse()
            .unwrap_or(out.len() as u64);
        out.push(Sample { id, image, label, mask });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coverage(s: &Sample) -> f64 {
        let m = s.mask.as_ref().unwrap();
        m.data().iter().step_by(2).filter(|&&v| v > 0.5).count() as f64 / (m.len() / 2) as f64
    }

    fn params(cat: &SynthCategory, scale: f64, rotation: f64, noise: f64) -> ShapeParams {
        ShapeParams {
            cx: 14.0,
            cy: 14.0,
            scale,
            rotation,
            intensity: cat.ranges.intensity.hi,
            noise,
        }
    }

    #[test]
    fn balance_and_determinism() {
        let cat = SynthCategory::new("c", Family::Ring);
        let a = generate_dataset(&cat, 10, 3).unwrap();
        assert_eq!(a.iter().filter(|s| s.label == 1).count(), 5);
        assert_eq!(a.iter().filter(|s| s.label == 0).count(), 5);
        let b = generate_dataset(&cat, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(generate_dataset(&cat, 3, 0).is_err());
        assert!(generate_dataset(&cat, 0, 0).is_err());
    }

    #[test]
    fn masks_are_one_hot_and_negatives_background() {
        let cat = SynthCategory::new("c", Family::Cross);
        for s in generate_dataset(&cat, 20, 1).unwrap() {
            let m = s.mask.as_ref().unwrap();
            for px in m.data().chunks_exact(2) {
                assert_eq!(px[0] + px[1], 1.0);
            }
            if s.label == 0 {
                assert_eq!(coverage(&s), 0.0);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noiseless_full_intensity_ellipse_mask_is_threshold() {
        let cat = SynthCategory::new("e", Family::Ellipse);
        let p = params(&cat, 7.0, 0.3, 0.0);
        let s = render_sample(&cat, &ShapeParams { intensity: 1.0, ..p }, (CANVAS, CANVAS), &mut Rng::new(0, 0)).unwrap();
        let m = s.mask.unwrap();
        for (i, &v) in s.image.data().iter().enumerate() {
            assert_eq!(m.data()[2 * i] == 1.0, v > 0.5, "pixel {i}");
        }
    }

    #[test]
    fn coverage_invariant_across_families_and_extremes() {
        for fam in Family::all() {
            let cat = SynthCategory::new("x", fam);
            let r = cat.ranges.clone();
            for scale in [r.scale.lo, r.scale.hi] {
                for (cx, cy) in [(r.cx.lo, r.cy.lo), (r.cx.hi, r.cy.hi)] {
                    for rot in [0.0, 0.7, 2.9] {
                        let p = ShapeParams { cx, cy, ..params(&cat, scale, rot, 0.1) };
                        let s = render_sample(&cat, &p, (CANVAS, CANVAS), &mut Rng::new(1, 0)).unwrap();
                        let c = coverage(&s);
                        assert!((0.05..=0.60).contains(&c), "{fam:?} scale {scale} coverage {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_rotation_by_pi_is_identical() {
        for fam in [Family::Ellipse, Family::Cross, Family::BarPair] {
            let mut cat = SynthCategory::new("s", fam);
            cat.ranges.rotation = Range::new(0.0, 4.0);
            let a = render_sample(&cat, &params(&cat, 7.0, 0.4, 0.0), (CANVAS, CANVAS), &mut Rng::new(0, 0)).unwrap();
            let b = render_sample(
                &cat,
                &params(&cat, 7.0, 0.4 + std::f64::consts::PI, 0.0),
                (CANVAS, CANVAS),
                &mut Rng::new(0, 0),
            )
            .unwrap();
            assert!(a.image.bit_eq(&b.image), "{fam:?}");
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        let cat = SynthCategory::new("e", Family::Ellipse);
        let p = params(&cat, 100.0, 0.0, 0.0);
        assert!(matches!(
            render_sample(&cat, &p, (CANVAS, CANVAS), &mut Rng::new(0, 0)),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn pgm_two_pixels_normalise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        fs::write(&p, bytes).unwrap();
        let t = read_pgm(&p).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_dir_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_dir(dir.path(), LabelRule::FromMask).unwrap().is_empty());
    }

    #[test]
    fn export_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cat = SynthCategory::new("b", Family::Blob);
        let data = generate_dataset(&cat, 8, 5).unwrap();
        export_dataset(&data, dir.path()).unwrap();
        let back = load_image_dir(dir.path(), LabelRule::Manifest).unwrap();
        assert_eq!(back, data);
        // without the manifest, labels come from the masks
        fs::remove_file(dir.path().join("manifest.csv")).unwrap();
        let back = load_image_dir(dir.path(), LabelRule::FromMask).unwrap();
        assert_eq!(back.iter().map(|s| s.label).collect::<Vec<_>>(), data.iter().map(|s| s.label).collect::<Vec<_>>());
    }

    #[test]
    fn downsample_mask_majority() {
        let m = Tensor::from_vec(&[2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(downsample_mask(&m, 2).unwrap().data(), &[1.0, 0.0]);
    }
}

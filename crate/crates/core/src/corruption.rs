//! Natural corruptions at severities 1–5 and loading of precomputed
//! corrupted sets.
//!
//! Seven kernels are implemented natively. Their per-severity parameters live
//! in a JSON table (`data/corruption_params.json` by default). Other
//! corruption types are read from precomputed tensor files described by a
//! small JSON manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::taxonomy::ClassTaxonomy;

const DEFAULT_TABLE: &str = include_str!("../data/corruption_params.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Saturation,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Saturation,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Saturation => "saturation",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Whether the kernel draws random numbers.
    pub fn is_seeded(&self) -> bool {
        matches!(self, CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        check_severity(severity)?;
        Ok(Self { kind, severity, seed })
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if (1..=5).contains(&severity) {
        Ok(())
    } else {
        Err(Error::invalid(format!("severity must be in 1..=5, got {severity}")))
    }
}

/// Per-kind parameters for severities 1..=5: noise σ, impulse fraction,
/// blur σ, brightness offset, contrast factor, saturation factor and
/// pixelation block size.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    values: BTreeMap<CorruptionKind, [f64; 5]>,
}

impl ParameterTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(text)?;
        let mut values = BTreeMap::new();
        for (name, v) in raw {
            let kind: CorruptionKind = name.parse()?;
            let arr: [f64; 5] = v
                .as_slice()
                .try_into()
                .map_err(|_| Error::invalid(format!("{name}: expected 5 severities, got {}", v.len())))?;
            let up = arr.windows(2).all(|w| w[0] < w[1]);
            let down = arr.windows(2).all(|w| w[0] > w[1]);
            if !(up || down) {
                return Err(Error::invalid(format!("{name}: parameters are not strictly monotone")));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name}: non-finite parameter")));
            }
            if kind == CorruptionKind::Pixelate && arr.iter().any(|&f| f < 1.0 || f.fract() != 0.0) {
                return Err(Error::invalid("pixelate: block sizes must be positive integers"));
            }
            values.insert(kind, arr);
        }
        if let Some(missing) = CorruptionKind::ALL.iter().find(|k| !values.contains_key(k)) {
            return Err(Error::invalid(format!("parameter table lacks {missing}")));
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    pub fn get(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        check_severity(severity)?;
        Ok(self.values[&kind][severity as usize - 1])
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &[f64; 5]> = self.values.iter().map(|(k, v)| (k.name(), v)).collect();
        serde_json::to_string_pretty(&map).expect("serialisable")
    }
}

impl Default for ParameterTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_TABLE).expect("bundled corruption table is valid")
    }
}

/// Corrupt one image. The result is clamped to [0, 1].
pub fn apply_corruption(image: &Image, spec: &CorruptionSpec, table: &ParameterTable) -> Result<Image> {
    let p = table.get(spec.kind, spec.severity)?;
    apply_with_parameter(image, spec.kind, p, spec.seed)
}

/// Corrupt one image with an explicit kernel parameter.
pub fn apply_with_parameter(image: &Image, kind: CorruptionKind, p: f64, seed: u64) -> Result<Image> {
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p).map_err(|e| Error::invalid(format!("noise σ {p}: {e}")))?;
            let mut r = rng::stream(seed);
            map_pixels(image, |v| v + normal.sample(&mut r) as f32)
        }
        CorruptionKind::ImpulseNoise => {
            let mut r = rng::stream(seed);
            map_pixels(image, |v| {
                if r.random::<f64>() < p {
                    if r.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
        }
        CorruptionKind::GaussianBlur => gaussian_blur(image, p),
        CorruptionKind::Brightness => map_pixels(image, |v| v + p as f32),
        CorruptionKind::Contrast => {
            let mean = (image.pixels.iter().map(|&v| v as f64).sum::<f64>() / image.len().max(1) as f64) as f32;
            map_pixels(image, |v| (v - mean) * p as f32 + mean)
        }
        CorruptionKind::Saturation => saturation(image, p as f32)?,
        CorruptionKind::Pixelate => pixelate(image, p as usize),
    };
    out.clamp_unit();
    Ok(out)
}

fn map_pixels(image: &Image, mut f: impl FnMut(f32) -> f32) -> Image {
    Image {
        pixels: image.pixels.iter().map(|&v| f(v)).collect(),
        ..image.clone()
    }
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    if radius == 0 {
        return image.clone();
    }
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c, h, w) = (image.channels, image.height, image.width);
    let mut tmp = vec![0.0f32; image.len()];
    let mut out = vec![0.0f32; image.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    acc += k * image.pixels[base + y * w + reflect(x as isize + d, w)] as f64;
                }
                tmp[base + y * w + x] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    acc += k * tmp[base + reflect(y as isize + d, h) * w + x] as f64;
                }
                out[base + y * w + x] = acc as f32;
            }
        }
    }
    Image {
        pixels: out,
        ..image.clone()
    }
}

fn saturation(image: &Image, factor: f32) -> Result<Image> {
    if image.channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "saturation needs 3 channels, got {}",
            image.channels
        )));
    }
    let plane = image.height * image.width;
    let mut out = image.clone();
    for i in 0..plane {
        let (r, g, b) = (image.pixels[i], image.pixels[plane + i], image.pixels[2 * plane + i]);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        for c in 0..3 {
            let v = image.pixels[c * plane + i];
            out.pixels[c * plane + i] = luma + factor * (v - luma);
        }
    }
    Ok(out)
}

/// Average over `block`×`block` cells (edge cells may be smaller) and repeat
/// each average over its cell.
fn pixelate(image: &Image, block: usize) -> Image {
    let block = block.max(1);
    let (c, h, w) = (image.channels, image.height, image.width);
    let mut out = image.clone();
    for ch in 0..c {
        let base = ch * h * w;
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0f64;
                for y in by..ey {
                    for x in bx..ex {
                        sum += image.pixels[base + y * w + x] as f64;
                    }
                }
                let mean = (sum / ((ey - by) * (ex - bx)) as f64) as f32;
                for y in by..ey {
                    for x in bx..ex {
                        out.pixels[base + y * w + x] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Corrupt every image of `ds`. Sample `i` uses seed `derive(spec.seed, i)`.
pub fn build_corrupted_set(ds: &Dataset, spec: &CorruptionSpec, table: &ParameterTable) -> Result<Dataset> {
    check_severity(spec.severity)?;
    let samples = ds
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let per = CorruptionSpec {
                seed: rng::derive(spec.seed, i as u64),
                ..*spec
            };
            Ok(Sample {
                image: apply_corruption(&s.image, &per, table)?,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        samples,
        split: ds.split,
        provenance: Provenance::Corrupted {
            kind: spec.kind.name().to_string(),
            severity: spec.severity,
            seed: spec.seed,
            base: Box::new(ds.provenance.clone()),
        },
        num_classes: ds.num_classes,
    })
}

/// Every kind at every severity.
pub fn build_corruption_grid(ds: &Dataset, seed: u64, table: &ParameterTable) -> Result<Vec<Dataset>> {
    let mut out = Vec::with_capacity(35);
    for kind in CorruptionKind::ALL {
        for severity in 1..=5 {
            out.push(build_corrupted_set(ds, &CorruptionSpec::new(kind, severity, seed)?, table)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    U8,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorLayout {
    /// Sample × channel × row × column.
    #[default]
    Chw,
    /// Sample × row × column × channel.
    Hwc,
}

/// Manifest of a precomputed corrupted set.
///
/// Either `severity` names the single severity in the file, or `severities`
/// lists the severity of each of several consecutive blocks of `count`
/// samples. Tensor and label files may be raw little-endian data or `.npy`
/// arrays; label files hold one label per sample or one per block row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedManifest {
    pub kind: String,
    #[serde(default)]
    pub severity: Option<u8>,
    #[serde(default)]
    pub severities: Option<Vec<u8>>,
    pub count: usize,
    pub dtype: TensorDtype,
    pub label_file: String,
    /// Defaults to the manifest path with a `.bin` extension.
    #[serde(default)]
    pub tensor_file: Option<String>,
    #[serde(default)]
    pub layout: TensorLayout,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// Largest legal stored value; pixels are divided by it. Defaults to 255
    /// for `u8` and 1 for `f32`.
    #[serde(default)]
    pub value_max: Option<f64>,
}

fn default_channels() -> usize {
    3
}

fn default_size() -> usize {
    32
}

/// Strip a `.npy` header if present and check its dtype.
fn npy_payload<'a>(bytes: &'a [u8], expect: &[&str], path: &Path) -> Result<&'a [u8]> {
    const MAGIC: &[u8] = b"\x93NUMPY";
    if !bytes.starts_with(MAGIC) {
        return Ok(bytes);
    }
    let bad = |msg: &str| Error::invalid(format!("{}: {msg}", path.display()));
    let major = *bytes.get(6).ok_or_else(|| bad("truncated npy header"))?;
    let (len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => (
            u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| bad("truncated npy header"))?.try_into().unwrap())
                as usize,
            12,
        ),
        v => return Err(bad(&format!("unsupported npy version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(start..start + len).ok_or_else(|| bad("truncated npy header"))?)
        .map_err(|_| bad("npy header is not text"))?;
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran-ordered npy arrays are not supported"));
    }
    if !expect.iter().any(|d| header.contains(&format!("'descr': '{d}'"))) {
        return Err(bad(&format!("npy dtype not one of {expect:?}: {header}")));
    }
    Ok(&bytes[start + len..])
}

fn read_labels(path: &Path, expected: &[usize]) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let is_npy = bytes.starts_with(b"\x93NUMPY");
    let labels: Vec<usize> = if is_npy {
        let payload = npy_payload(&bytes, &["<i8", "<i4", "|u1"], path)?;
        let header = String::from_utf8_lossy(&bytes[..bytes.len() - payload.len()]);
        if header.contains("<i8") {
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()).max(0) as usize)
                .collect()
        } else if header.contains("<i4") {
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()).max(0) as usize)
                .collect()
        } else {
            payload.iter().map(|&b| b as usize).collect()
        }
    } else {
        bytes.iter().map(|&b| b as usize).collect()
    };
    if !expected.contains(&labels.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} labels, expected one of {expected:?}",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Load a precomputed corrupted set, returning one dataset per severity
/// block. Labels are fine-class indices of `tax`.
pub fn load_precomputed_corruption_set(manifest_path: impl AsRef<Path>, tax: &ClassTaxonomy) -> Result<Vec<Dataset>> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::file(manifest_path, e))?;
    let m: PrecomputedManifest = serde_json::from_str(&text)?;
    let severities = match (&m.severity, &m.severities) {
        (Some(s), None) => vec![*s],
        (None, Some(list)) if !list.is_empty() => list.clone(),
        _ => {
            return Err(Error::invalid(
                "manifest must give exactly one of `severity` or a non-empty `severities`",
            ))
        }
    };
    for &s in &severities {
        check_severity(s)?;
    }
    if m.count == 0 {
        return Err(Error::invalid("manifest count is zero"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let tensor_path: PathBuf = match &m.tensor_file {
        Some(f) => dir.join(f),
        None => manifest_path.with_extension("bin"),
    };
    let bytes = fs::read(&tensor_path).map_err(|e| Error::file(&tensor_path, e))?;
    let (payload, width) = match m.dtype {
        TensorDtype::U8 => (npy_payload(&bytes, &["|u1"], &tensor_path)?, 1),
        TensorDtype::F32 => (npy_payload(&bytes, &["<f4"], &tensor_path)?, 4),
    };
    let per_image = m.channels * m.image_size * m.image_size;
    let total = m.count * severities.len();
    if payload.len() != total * per_image * width {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} bytes; manifest declares {} samples of {} values at {} bytes",
            tensor_path.display(),
            payload.len(),
            total,
            per_image,
            width
        )));
    }
    let value_max = m.value_max.unwrap_or(match m.dtype {
        TensorDtype::U8 => 255.0,
        TensorDtype::F32 => 1.0,
    });
    if !(value_max > 0.0) {
        return Err(Error::invalid("value_max must be positive"));
    }
    let values: Vec<f64> = match m.dtype {
        TensorDtype::U8 => payload.iter().map(|&b| b as f64).collect(),
        TensorDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(i) = values.iter().position(|&v| !(0.0..=value_max).contains(&v)) {
        return Err(Error::invalid(format!(
            "{}: value {} at index {i} outside the declared range [0, {value_max}]",
            tensor_path.display(),
            values[i]
        )));
    }
    let labels = read_labels(&dir.join(&m.label_file), &[m.count, total])?;
    let (c, s) = (m.channels, m.image_size);
    let mut out = Vec::with_capacity(severities.len());
    for (block, &severity) in severities.iter().enumerate() {
        let mut samples = Vec::with_capacity(m.count);
        for j in 0..m.count {
            let idx = block * m.count + j;
            let raw = &values[idx * per_image..(idx + 1) * per_image];
            let pixels: Vec<f32> = match m.layout {
                TensorLayout::Chw => raw.iter().map(|&v| (v / value_max) as f32).collect(),
                TensorLayout::Hwc => {
                    let mut p = vec![0.0f32; per_image];
                    for y in 0..s {
                        for x in 0..s {
                            for ch in 0..c {
                                p[(ch * s + y) * s + x] = (raw[(y * s + x) * c + ch] / value_max) as f32;
                            }
                        }
                    }
                    p
                }
            };
            let label = labels[if labels.len() == total { idx } else { j }];
            if label >= tax.num_fine() {
                return Err(Error::LabelOutOfRange {
                    record: idx,
                    label,
                    classes: tax.num_fine(),
                });
            }
            samples.push(Sample {
                image: Image::new(c, s, s, pixels)?,
                fine_label: label,
                coarse_label: tax.coarse_of(label)?,
            });
        }
        out.push(Dataset {
            samples,
            split: Split::Test,
            provenance: Provenance::Precomputed {
                kind: m.kind.clone(),
                severity,
                path: tensor_path.display().to_string(),
            },
            num_classes: tax.num_fine(),
        });
    }
    Ok(out)
}

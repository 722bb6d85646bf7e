//! Images, datasets and the training input pipeline.

mod augment;
mod cifar;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::taxonomy::ClassTaxonomy;

pub use augment::{augment, AugmentationConfig, AugmentationDraw};
pub use cifar::{
    load_cifar100_dir, parse_cifar100_binary, write_cifar100_binary, CIFAR_IMAGE_BYTES,
    CIFAR_RECORD_BYTES,
};
pub use synthetic::{balanced_taxonomy, generate_synthetic, synthetic_for_taxonomy, SyntheticSpec};

/// Channel-major image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {channels}x{height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for plane in out.pixels.chunks_mut(self.width) {
            plane.reverse();
        }
        out
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub fine_label: usize,
    pub coarse_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Cifar100Binary {
        path: String,
    },
    Synthetic {
        num_classes: usize,
        images_per_class: usize,
        image_size: usize,
        seed: u64,
    },
    /// Generated natively by a corruption kernel.
    Corrupted {
        kind: String,
        severity: u8,
        seed: u64,
        base: Box<Provenance>,
    },
    /// Loaded from a precomputed corruption set.
    Precomputed {
        kind: String,
        severity: u8,
        path: String,
    },
    Subset {
        classes: Vec<String>,
        base: Box<Provenance>,
    },
    Other {
        description: String,
    },
}

impl Provenance {
    /// Corruption kind and severity, when this dataset is a corrupted set.
    pub fn corruption(&self) -> Option<(&str, u8)> {
        match self {
            Provenance::Corrupted { kind, severity, .. }
            | Provenance::Precomputed { kind, severity, .. } => Some((kind, *severity)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub provenance: Provenance,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Check shapes, label ranges and fine→coarse consistency.
    pub fn validate(&self, tax: &ClassTaxonomy) -> Result<()> {
        if self.num_classes != tax.num_fine() {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} classes, taxonomy {}",
                self.num_classes,
                tax.num_fine()
            )));
        }
        let shape = self.image_shape();
        for (i, s) in self.samples.iter().enumerate() {
            if Some(s.image.shape()) != shape {
                return Err(Error::ShapeMismatch(format!("sample {i} has a different shape")));
            }
            if tax.coarse_of(s.fine_label)? != s.coarse_label {
                return Err(Error::invalid(format!(
                    "sample {i}: coarse label {} disagrees with taxonomy",
                    s.coarse_label
                )));
            }
        }
        Ok(())
    }

    /// Keep samples whose fine label is in `original`, relabelled to their
    /// position there; coarse labels are recomputed from `tax`.
    pub fn restrict_classes(&self, original: &[usize], tax: &ClassTaxonomy) -> Result<Dataset> {
        let mut remap = vec![None; self.num_classes];
        for (new, &old) in original.iter().enumerate() {
            *remap.get_mut(old).ok_or(Error::UnknownClass(old))? = Some(new);
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|s| remap[s.fine_label].map(|f| (s, f)))
            .map(|(s, f)| {
                Ok(Sample {
                    image: s.image.clone(),
                    fine_label: f,
                    coarse_label: tax.coarse_of(f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            split: self.split,
            provenance: Provenance::Subset {
                classes: tax.fine_names().into_iter().map(String::from).collect(),
                base: Box::new(self.provenance.clone()),
            },
            num_classes: original.len(),
        })
    }

    /// First `per_class` samples of every class, in dataset order.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0usize; self.num_classes];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                counts[s.fine_label] += 1;
                counts[s.fine_label] <= per_class
            })
            .cloned()
            .collect();
        Dataset {
            samples,
            split: self.split,
            provenance: self.provenance.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Persist as a JSON manifest plus a flat little-endian f32 tensor file
    /// written next to it.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let [channels, height, width] = self.image_shape().unwrap_or([0, 0, 0]);
        let tensor_file = tensor_file_name(manifest_path);
        let manifest = DatasetManifest {
            split: self.split,
            provenance: self.provenance.clone(),
            count: self.len(),
            channels,
            height,
            width,
            num_classes: self.num_classes,
            fine_labels: self.samples.iter().map(|s| s.fine_label).collect(),
            coarse_labels: self.samples.iter().map(|s| s.coarse_label).collect(),
            tensor_file: tensor_file.clone(),
        };
        let mut bytes = Vec::with_capacity(self.len() * channels * height * width * 4);
        for s in &self.samples {
            for v in &s.image.pixels {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        fs::write(dir.join(&tensor_file), bytes).map_err(|e| Error::file(dir.join(&tensor_file), e))?;
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::file(manifest_path, e))?;
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let text =
            fs::read_to_string(manifest_path).map_err(|e| Error::file(manifest_path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let tensor_path: PathBuf = dir.join(&m.tensor_file);
        let bytes = fs::read(&tensor_path).map_err(|e| Error::file(&tensor_path, e))?;
        let per = m.channels * m.height * m.width;
        if bytes.len() != m.count * per * 4
            || m.fine_labels.len() != m.count
            || m.coarse_labels.len() != m.count
        {
            return Err(Error::ShapeMismatch(format!(
                "{}: manifest declares {} samples of {per} values",
                manifest_path.display(),
                m.count
            )));
        }
        let samples = bytes
            .chunks_exact(per * 4)
            .zip(m.fine_labels.iter().zip(&m.coarse_labels))
            .map(|(chunk, (&fine, &coarse))| {
                let pixels = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                if fine >= m.num_classes {
                    return Err(Error::UnknownClass(fine));
                }
                Ok(Sample {
                    image: Image::new(m.channels, m.height, m.width, pixels)?,
                    fine_label: fine,
                    coarse_label: coarse,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            split: m.split,
            provenance: m.provenance,
            num_classes: m.num_classes,
        })
    }
}

fn tensor_file_name(manifest_path: &Path) -> String {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    format!("{stem}.f32")
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    split: Split,
    provenance: Provenance,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    fine_labels: Vec<usize>,
    coarse_labels: Vec<usize>,
    tensor_file: String,
}

/// Seeded permutation of sample indices split into batches; the final short
/// batch is kept.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(shuffle_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seeded shuffled batches of samples.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<&Sample>>> {
    Ok(batch_indices(ds.len(), batch_size, shuffle_seed)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| &ds.samples[i]).collect())
        .collect())
}

//! Deterministic synthetic datasets whose visual structure follows a class tree.
//!
//! Every non-root tree node owns a coloured sinusoidal pattern. A class
//! prototype is mid-grey plus the patterns of all nodes on its root path, so
//! the prototypes of two classes differ by exactly the patterns on the tree
//! path between them: squared prototype distance grows with tree distance.
//! Internal nodes draw weaker patterns than leaves, so the nearest class is
//! often, but not always, a tree neighbour.
//! Images add a per-image gain, a context pattern, an unrelated distractor
//! pattern and pixel noise to the prototype.
//!
//! Context patterns stand in for backgrounds shared by unrelated classes: each
//! class has a preferred context drawn from a small pool independently of the
//! tree, and an image shows that context with probability
//! `CONTEXT_CONSISTENCY`, otherwise a uniformly drawn one.

use std::f32::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::taxonomy::{ClassEntry, ClassTaxonomy, EdgeEntry, HierarchyFile, NodeEntry};

const CHANNELS: usize = 3;
const PATTERN_BUDGET: f32 = 0.8;
/// Amplitude of internal-node patterns relative to leaf patterns.
const INTERNAL_SCALE: f32 = 0.4;
const CONTEXTS: usize = 4;
/// Context amplitude relative to one tree-node pattern.
const CONTEXT_SCALE: f32 = 1.5;
const CONTEXT_CONSISTENCY: f64 = 0.8;
const NOISE_STD: f32 = 0.06;
const DISTRACTOR_AMPLITUDE: f32 = 0.05;
const GAIN_RANGE: (f32, f32) = (0.8, 1.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Two-level tree: `root` → `group_g` → `class_i`, with about `sqrt(n)` groups.
pub fn balanced_taxonomy(num_classes: usize) -> Result<ClassTaxonomy> {
    if num_classes < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    let per_group = (num_classes as f64).sqrt().ceil() as usize;
    let groups = num_classes.div_ceil(per_group);
    let mut nodes = vec![NodeEntry { name: "root".into() }];
    let mut edges = Vec::new();
    for g in 0..groups {
        nodes.push(NodeEntry { name: format!("group_{g:02}") });
        edges.push(EdgeEntry {
            child: format!("group_{g:02}"),
            parent: "root".into(),
        });
    }
    let mut classes = Vec::new();
    for c in 0..num_classes {
        let g = c / per_group;
        let name = format!("class_{c:02}");
        nodes.push(NodeEntry { name: name.clone() });
        edges.push(EdgeEntry {
            child: name.clone(),
            parent: format!("group_{g:02}"),
        });
        classes.push(ClassEntry {
            fine_index: c,
            node_name: name,
            coarse_index: Some(g),
            coarse_name: Some(format!("group_{g:02}")),
        });
    }
    ClassTaxonomy::from_file(&HierarchyFile {
        nodes,
        edges,
        classes,
    })
}

/// Training split of a synthetic dataset together with its balanced taxonomy.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, ClassTaxonomy)> {
    let tax = balanced_taxonomy(spec.num_classes)?;
    let ds = synthetic_for_taxonomy(&tax, spec.images_per_class, spec.image_size, spec.seed, Split::Train)?;
    Ok((ds, tax))
}

/// Synthetic images for the fine classes of an arbitrary taxonomy. Prototypes
/// depend only on `seed` and node names, so train and test splits (and class
/// subsets) share them; per-image randomness also depends on the split.
pub fn synthetic_for_taxonomy(
    tax: &ClassTaxonomy,
    images_per_class: usize,
    image_size: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if images_per_class == 0 || image_size == 0 {
        return Err(Error::invalid("synthetic spec has no images"));
    }
    if tax.num_fine() < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    let plane = image_size * image_size;
    // Leaf amplitude chosen so a full-depth path carries PATTERN_BUDGET in RMS.
    let depth = tax.depth().max(1) as f32;
    let amplitude = PATTERN_BUDGET / (1.0 + INTERNAL_SCALE * INTERNAL_SCALE * (depth - 1.0)).sqrt();

    let prototypes: Vec<Vec<f32>> = (0..tax.num_fine())
        .map(|f| {
            let mut proto = vec![0.5f32; CHANNELS * plane];
            let mut node = tax.fine_name(f)?.to_string();
            while let Some(parent) = tax.parent_of(&node)? {
                let mut r = rng::stream(rng::derive(seed, name_hash(&node)));
                let leaf = node == tax.fine_name(f)?;
                let scale = if leaf { 1.0 } else { INTERNAL_SCALE };
                add_pattern(&mut proto, image_size, scale * amplitude, &mut r);
                node = parent.to_string();
            }
            Ok(proto)
        })
        .collect::<Result<_>>()?;

    let contexts: Vec<Vec<f32>> = (0..CONTEXTS)
        .map(|i| {
            let mut pattern = vec![0.0f32; CHANNELS * plane];
            let mut r = rng::stream(rng::derive(seed, name_hash(&format!("context/{i}"))));
            add_pattern(&mut pattern, image_size, CONTEXT_SCALE * amplitude, &mut r);
            pattern
        })
        .collect();
    let preferred: Vec<usize> = (0..tax.num_fine())
        .map(|f| Ok(rng::stream(rng::derive(seed, name_hash(tax.fine_name(f)?))).random_range(0..CONTEXTS)))
        .collect::<Result<_>>()?;

    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut r = rng::stream(rng::derive(seed, split_tag));
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let mut samples = Vec::with_capacity(tax.num_fine() * images_per_class);
    for _ in 0..images_per_class {
        for (f, proto) in prototypes.iter().enumerate() {
            let gain = r.random_range(GAIN_RANGE.0..GAIN_RANGE.1);
            let context = if r.random::<f64>() < CONTEXT_CONSISTENCY {
                preferred[f]
            } else {
                r.random_range(0..CONTEXTS)
            };
            let mut pixels: Vec<f32> = proto
                .iter()
                .zip(&contexts[context])
                .map(|(&p, &c)| 0.5 + gain * (p - 0.5) + c)
                .collect();
            add_pattern(&mut pixels, image_size, DISTRACTOR_AMPLITUDE, &mut r);
            for v in &mut pixels {
                *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
            }
            samples.push(Sample {
                image: Image::new(CHANNELS, image_size, image_size, pixels)?,
                fine_label: f,
                coarse_label: tax.coarse_of(f)?,
            });
        }
    }
    Ok(Dataset {
        samples,
        split,
        provenance: Provenance::Synthetic {
            num_classes: tax.num_fine(),
            images_per_class,
            image_size,
            seed,
        },
        num_classes: tax.num_fine(),
    })
}

fn add_pattern<R: Rng>(pixels: &mut [f32], size: usize, amplitude: f32, r: &mut R) {
    let color: [f32; CHANNELS] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
    let fx: f32 = r.random_range(-3.0..3.0);
    let fy: f32 = r.random_range(-3.0..3.0);
    let phase: f32 = r.random_range(0.0..TAU);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let s = (TAU * (fx * x as f32 + fy * y as f32) / size as f32 + phase).sin();
            for (c, col) in color.iter().enumerate() {
                pixels[c * plane + y * size + x] += amplitude * col * s;
            }
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

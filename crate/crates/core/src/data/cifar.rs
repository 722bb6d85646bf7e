//! CIFAR-100 binary format: per record, one coarse label byte, one fine label
//! byte, then 3072 pixel bytes as R, G and B planes of 32x32 row-major values.

use std::path::Path;

use super::{Dataset, Image, Provenance, Sample, Split};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const CHANNELS: usize = 3;
const FINE_CLASSES: usize = 100;
const COARSE_CLASSES: usize = 20;

pub const CIFAR_IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const CIFAR_RECORD_BYTES: usize = 2 + CIFAR_IMAGE_BYTES;

pub fn parse_cifar100_binary(bytes: &[u8], split: Split, source: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Truncated {
            len: bytes.len(),
            record: CIFAR_RECORD_BYTES,
        });
    }
    let samples = bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(record, rec)| {
            let coarse = rec[0] as usize;
            let fine = rec[1] as usize;
            if coarse >= COARSE_CLASSES {
                return Err(Error::LabelOutOfRange {
                    record,
                    label: coarse,
                    classes: COARSE_CLASSES,
                });
            }
            if fine >= FINE_CLASSES {
                return Err(Error::LabelOutOfRange {
                    record,
                    label: fine,
                    classes: FINE_CLASSES,
                });
            }
            let pixels = rec[2..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(Sample {
                image: Image::new(CHANNELS, SIDE, SIDE, pixels)?,
                fine_label: fine,
                coarse_label: coarse,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        samples,
        split,
        provenance: Provenance::Cifar100Binary {
            path: source.to_string(),
        },
        num_classes: FINE_CLASSES,
    })
}

/// Inverse of [`parse_cifar100_binary`] for 3x32x32 datasets.
pub fn write_cifar100_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for (i, s) in ds.samples.iter().enumerate() {
        if s.image.shape() != [CHANNELS, SIDE, SIDE] {
            return Err(Error::ShapeMismatch(format!("sample {i} is not 3x32x32")));
        }
        if s.coarse_label > u8::MAX as usize || s.fine_label > u8::MAX as usize {
            return Err(Error::invalid(format!("sample {i} label does not fit in a byte")));
        }
        out.push(s.coarse_label as u8);
        out.push(s.fine_label as u8);
        out.extend(
            s.image
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

/// Load `train.bin` and `test.bin` from an extracted `cifar-100-binary` directory.
pub fn load_cifar100_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let read = |name: &str, split| {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        parse_cifar100_binary(&bytes, split, &path.display().to_string())
    };
    Ok((read("train.bin", Split::Train)?, read("test.bin", Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(coarse: u8, fine: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend((0..CIFAR_IMAGE_BYTES).map(fill));
        r
    }

    #[test]
    fn record_size() {
        assert_eq!(CIFAR_RECORD_BYTES, 3074);
    }

    #[test]
    fn scaling_endpoints_and_layout() {
        // red plane 255, green 0, blue 0 except the last pixel
        let bytes = record(3, 42, |i| match i {
            i if i < 1024 => 255,
            i if i == CIFAR_IMAGE_BYTES - 1 => 128,
            _ => 0,
        });
        let ds = parse_cifar100_binary(&bytes, Split::Test, "mem").unwrap();
        let s = &ds.samples[0];
        assert_eq!((s.coarse_label, s.fine_label), (3, 42));
        assert_eq!(s.image.at(0, 5, 7), 1.0);
        assert_eq!(s.image.at(1, 5, 7), 0.0);
        assert_eq!(s.image.at(2, 31, 31), 128.0 / 255.0);
    }

    #[test]
    fn truncation_and_label_errors() {
        let bytes = record(0, 0, |_| 0);
        assert!(matches!(
            parse_cifar100_binary(&bytes[..3073], Split::Train, "mem"),
            Err(Error::Truncated { len: 3073, .. })
        ));
        let bad = record(0, 100, |_| 0);
        assert!(matches!(
            parse_cifar100_binary(&bad, Split::Train, "mem"),
            Err(Error::LabelOutOfRange { label: 100, .. })
        ));
        let bad = record(20, 1, |_| 0);
        assert!(matches!(
            parse_cifar100_binary(&bad, Split::Train, "mem"),
            Err(Error::LabelOutOfRange { label: 20, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn binary_round_trip(records in prop::collection::vec(
            (0u8..20, 0u8..100, prop::collection::vec(any::<u8>(), CIFAR_IMAGE_BYTES)), 1..4)) {
            let bytes: Vec<u8> = records.iter().flat_map(|(c, f, px)| {
                let mut r = vec![*c, *f];
                r.extend_from_slice(px);
                r
            }).collect();
            let ds = parse_cifar100_binary(&bytes, Split::Train, "mem").unwrap();
            prop_assert_eq!(write_cifar100_binary(&ds).unwrap(), bytes);
        }
    }
}

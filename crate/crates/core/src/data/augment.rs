use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};

/// Random crop from a zero-padded image followed by a random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub crop_padding: usize,
    pub hflip_probability: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            hflip_probability: 0.5,
            seed: 0,
        }
    }
}

/// One draw of augmentation randomness: crop window offsets into the padded
/// image (each in `0..=2*padding`) and whether to mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentationDraw {
    pub dx: usize,
    pub dy: usize,
    pub flip: bool,
}

impl AugmentationConfig {
    /// Disabled augmentation.
    pub fn identity() -> Self {
        Self {
            crop_padding: 0,
            hflip_probability: 0.0,
            seed: 0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentationDraw {
        let span = 2 * self.crop_padding + 1;
        let dx = rng.random_range(0..span);
        let dy = rng.random_range(0..span);
        let flip = self.hflip_probability > 0.0 && rng.random::<f64>() < self.hflip_probability;
        AugmentationDraw { dx, dy, flip }
    }

    pub fn apply(&self, image: &Image, draw: AugmentationDraw) -> Image {
        let pad = self.crop_padding as isize;
        let (h, w) = (image.height as isize, image.width as isize);
        let mut out = Image::zeros(image.channels, image.height, image.width);
        for c in 0..image.channels {
            for y in 0..h {
                let sy = y + draw.dy as isize - pad;
                if sy < 0 || sy >= h {
                    continue;
                }
                for x in 0..w {
                    let sx = x + draw.dx as isize - pad;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    let ox = if draw.flip { w - 1 - x } else { x };
                    out.pixels[((c as isize * h + y) * w + ox) as usize] =
                        image.at(c, sy as usize, sx as usize);
                }
            }
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentationConfig, rng: &mut R) -> Sample {
    let draw = cfg.draw(rng);
    Sample {
        image: cfg.apply(&sample.image, draw),
        ..sample.clone()
    }
}

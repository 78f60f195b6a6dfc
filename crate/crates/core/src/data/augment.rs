//! Random flip, reflect-pad crop, and random erasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{GrayImage, HEIGHT, PIXELS, WIDTH};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_pad: usize,
    pub erase_prob: f64,
    /// Erased fraction of the image area, sampled uniformly in `[min, max]`.
    pub erase_area: (f64, f64),
    /// Height/width ratio of the erased rectangle, sampled uniformly in `[min, max]`.
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_pad: 4,
            erase_prob: 0.5,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 1.0 / 0.3),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            crop_pad: 0,
            erase_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("augment.flip_prob", self.flip_prob), ("augment.erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("probability {p} outside [0, 1]")));
            }
        }
        let (a0, a1) = self.erase_area;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::config("augment.erase_area", format!("invalid range ({a0}, {a1})")));
        }
        let (r0, r1) = self.erase_aspect;
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::config("augment.erase_aspect", format!("invalid range ({r0}, {r1})")));
        }
        if self.crop_pad >= HEIGHT {
            return Err(Error::config("augment.crop_pad", "padding must be smaller than the image"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0 && self.crop_pad == 0 && self.erase_prob == 0.0
    }
}

/// Augments with a generator seeded from `rng_state`; same state, same output.
pub fn augment(image: &GrayImage, rng_state: u64, config: &AugmentConfig) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_state);
    augment_with(image, &mut rng, config)
}

pub fn augment_with<R: Rng>(image: &GrayImage, rng: &mut R, config: &AugmentConfig) -> GrayImage {
    let mut px = image.pixels().to_vec();
    if rng.random_bool(config.flip_prob) {
        flip_horizontal(&mut px);
    }
    if config.crop_pad > 0 {
        let pad = config.crop_pad as i64;
        let top = (rng.random_range(0..=2 * pad) - pad) as isize;
        let left = (rng.random_range(0..=2 * pad) - pad) as isize;
        px = shift_reflect(&px, top, left);
    }
    if rng.random_bool(config.erase_prob) {
        if let Some(rect) = sample_erase_rect(rng, config) {
            let (r0, c0, h, w) = rect;
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    px[r * WIDTH + c] = rng.random::<f64>();
                }
            }
        }
    }
    GrayImage::new(px).expect("augmentation keeps pixels in [0, 1]")
}

pub fn flip_horizontal(px: &mut [f64]) {
    for row in px.chunks_exact_mut(WIDTH) {
        row.reverse();
    }
}

fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Crops the 48×48 window at offset (dy, dx) from a reflect-padded copy.
fn shift_reflect(px: &[f64], dy: isize, dx: isize) -> Vec<f64> {
    let (h, w) = (HEIGHT as isize, WIDTH as isize);
    let mut out = Vec::with_capacity(PIXELS);
    for r in 0..h {
        let sr = reflect(r + dy, h);
        for c in 0..w {
            out.push(px[sr * WIDTH + reflect(c + dx, w)]);
        }
    }
    out
}

/// Samples (row, col, height, width) of an erasing rectangle, retrying up to
/// ten times when the sampled shape does not fit.
pub fn sample_erase_rect<R: Rng>(rng: &mut R, config: &AugmentConfig) -> Option<(usize, usize, usize, usize)> {
    for _ in 0..10 {
        let area = rng.random_range(config.erase_area.0..=config.erase_area.1) * PIXELS as f64;
        let aspect = rng.random_range(config.erase_aspect.0..=config.erase_aspect.1);
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h > 0 && w > 0 && h < HEIGHT && w < WIDTH {
            let r0 = rng.random_range(0..=HEIGHT - h);
            let c0 = rng.random_range(0..=WIDTH - w);
            return Some((r0, c0, h, w));
        }
    }
    None
}

//! Synthetic three-class glyph faces for end-to-end checks.
//!
//! Every image has three salient regions laid out like two eyes and a mouth.
//! Each region carries the class glyph (horizontal bars, vertical bars, or a
//! cross) at a jittered offset over a noisy background. The mouth glyph has
//! the strongest contrast, so a classifier can get by on it alone; the
//! occluded test variant blacks out one region per image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fer::{Dataset, LabeledExample, Split};
use super::image::{GrayImage, PIXELS, WIDTH};
use crate::seed::derive_seed;

pub const GLYPH_CLASSES: usize = 3;
const GLYPH: usize = 10;

/// Salient regions as half-open (top, left, bottom, right).
pub const GLYPH_REGIONS: [(usize, usize, usize, usize); 3] =
    [(8, 4, 20, 20), (8, 28, 20, 44), (30, 14, 42, 34)];

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub background: f64,
    pub noise: f64,
    /// Glyph contrast per region (left eye, right eye, mouth).
    pub contrast: [f64; 3],
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            train: 3000,
            val: 600,
            test: 600,
            seed: 0,
            background: 0.3,
            noise: 0.1,
            contrast: [0.35, 0.35, 0.6],
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlyphDataset {
    pub clean: Dataset,
    /// Same train/val splits; every test image has one region blacked out.
    pub occluded: Dataset,
}

fn glyph_on(class: usize, r: usize, c: usize) -> bool {
    match class {
        0 => r == 2 || r == 3 || r == 7 || r == 8,
        1 => c == 2 || c == 3 || c == 7 || c == 8,
        _ => r == c || r + 1 == c || r + c == GLYPH - 1 || r + c == GLYPH,
    }
}

fn render(class: usize, cfg: &GlyphConfig, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut px: Vec<f64> = (0..PIXELS)
        .map(|_| cfg.background + rng.random_range(-cfg.noise..=cfg.noise))
        .collect();
    for (region, &(top, left, bottom, right)) in GLYPH_REGIONS.iter().enumerate() {
        let dy = rng.random_range(0..=(bottom - top - GLYPH));
        let dx = rng.random_range(0..=(right - left - GLYPH));
        for r in 0..GLYPH {
            for c in 0..GLYPH {
                if glyph_on(class, r, c) {
                    px[(top + dy + r) * WIDTH + left + dx + c] += cfg.contrast[region];
                }
            }
        }
    }
    GrayImage::new(px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("clamped")
}

/// Blacks out one salient region.
pub fn occlude(image: &GrayImage, region: usize) -> GrayImage {
    let (top, left, bottom, right) = GLYPH_REGIONS[region];
    image.map(|p, v| {
        let (r, c) = (p / WIDTH, p % WIDTH);
        if (top..bottom).contains(&r) && (left..right).contains(&c) {
            0.0
        } else {
            v
        }
    })
}

pub fn generate_glyphs(cfg: &GlyphConfig) -> GlyphDataset {
    let mut examples = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    for (split, count) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[split as u64, 0x61]));
        for i in 0..count {
            // Balanced classes, order shuffled by the generator.
            let label = (i + rng.random_range(0..GLYPH_CLASSES)) % GLYPH_CLASSES;
            examples.push(LabeledExample {
                image: render(label, cfg, &mut rng),
                label,
                split,
            });
        }
    }
    let clean = Dataset::new(examples);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x0cc1]));
    let occluded_test = clean
        .examples
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| LabeledExample {
            image: occlude(&e.image, rng.random_range(0..GLYPH_REGIONS.len())),
            ..e.clone()
        })
        .collect();
    let occluded = clean.with_split_replaced(Split::Test, occluded_test);
    GlyphDataset { clean, occluded }
}

//! Attention extraction, ensembles, and gradient saliency.

use super::model::{images_to_tensor, Model};
use crate::data::fer::NUM_CLASSES;
use crate::data::image::{GrayImage, HEIGHT, PIXELS, WIDTH};
use crate::error::{Error, Result};
use crate::tape::Tape;

/// A 48×48 spatial weight grid with entries in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn height(&self) -> usize {
        HEIGHT
    }

    pub fn width(&self) -> usize {
        WIDTH
    }
}

/// Bilinear resize of a row-major `h×w` grid (half-pixel centres, edges clamped).
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "grid size");
    let axis = |dst: usize, n_in: usize, n_out: usize| {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = axis(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = axis(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Last attention module's map for each image, upsampled to 48×48.
pub fn extract_attention_batch(model: &Model, images: &[&GrayImage]) -> Result<Vec<AttentionMap>> {
    let (maps, h, w) = model.raw_attention(images)?;
    Ok(maps
        .iter()
        .map(|m| AttentionMap {
            values: bilinear_upsample(m, h, w, HEIGHT, WIDTH),
        })
        .collect())
}

pub fn extract_attention(model: &Model, image: &GrayImage) -> Result<AttentionMap> {
    Ok(extract_attention_batch(model, &[image])?.remove(0))
}

/// Mean of the models' softmax outputs.
pub fn ensemble_predict(models: &[&Model], image: &GrayImage) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Contract("ensemble needs at least one model".into()));
    }
    let mut mean = vec![0.0; NUM_CLASSES];
    for m in models {
        let p = m.predict_proba(&[image])?.remove(0);
        mean.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    let n = models.len() as f64;
    Ok(mean.into_iter().map(|v| v / n).collect())
}

/// Raw gradient of `logit[class_index]` with respect to every input pixel.
pub fn logit_gradient(model: &Model, image: &GrayImage, class_index: usize) -> Result<Vec<f64>> {
    if class_index >= NUM_CLASSES {
        return Err(Error::Index(format!("class {class_index} outside [0, {NUM_CLASSES})")));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let x = tape.leaf(images_to_tensor([image]).requires_grad(true))?;
    let out = model.forward(&mut tape, x, &bound)?;
    let logit = tape.select(out.logits, class_index)?;
    tape.backward(logit)?;
    Ok(tape.grad(x).map_or_else(|| vec![0.0; PIXELS], <[f64]>::to_vec))
}

/// |∂ logit / ∂ pixel| scaled so the largest entry is 1 (all zeros stay zero).
pub fn saliency(model: &Model, image: &GrayImage, class_index: usize) -> Result<Vec<f64>> {
    let abs: Vec<f64> = logit_gradient(model, image, class_index)?
        .into_iter()
        .map(f64::abs)
        .collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    Ok(if max > 0.0 { abs.into_iter().map(|v| v / max).collect() } else { abs })
}

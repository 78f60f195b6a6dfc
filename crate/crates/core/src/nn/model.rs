//! Layer-list model specs, parameter initialization, and forward passes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{spatial_attention_forward, SpatialAttentionModule};
use crate::checkpoint::Checkpoint;
use crate::data::fer::NUM_CLASSES;
use crate::data::image::{GrayImage, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use crate::tape::{conv_output_extent, softmax_row, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// `out` channels, square `kernel`, padding `(kernel − 1) / 2`.
    Conv { out: usize, kernel: usize, stride: usize },
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    Attention { kernel: usize },
    GlobalAvgPool,
    Flatten,
    Dense { out: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    AttentionClassifier,
    Predictor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub layers: Vec<Layer>,
}

pub const DEFAULT_ATTENTION_LAYERS: &str =
    "conv:16:3, relu, maxpool:2, conv:32:3, relu, maxpool:2, att:7, conv:64:3, relu, maxpool:2, gap, dense:7";
pub const DEFAULT_PREDICTOR_LAYERS: &str =
    "conv:16:3, relu, maxpool:2, conv:32:3, relu, maxpool:2, conv:64:3, relu, maxpool:2, gap, dense:7";

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { out, kernel, stride: 1 } => write!(f, "conv:{out}:{kernel}"),
            Layer::Conv { out, kernel, stride } => write!(f, "conv:{out}:{kernel}:{stride}"),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool(s) => write!(f, "maxpool:{s}"),
            Layer::AvgPool(s) => write!(f, "avgpool:{s}"),
            Layer::Attention { kernel } => write!(f, "att:{kernel}"),
            Layer::GlobalAvgPool => f.write_str("gap"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { out } => write!(f, "dense:{out}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let n = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.trim().parse().ok())
                .filter(|&v: &usize| v > 0)
                .ok_or_else(|| Error::Spec(format!("layer `{s}` needs a positive integer in field {i}")))
        };
        let arity = |expected: &[usize]| {
            if expected.contains(&parts.len()) {
                Ok(())
            } else {
                Err(Error::Spec(format!("layer `{s}` has the wrong number of fields")))
            }
        };
        let layer = match parts[0].trim() {
            "conv" => {
                arity(&[3, 4])?;
                Layer::Conv {
                    out: n(1)?,
                    kernel: n(2)?,
                    stride: if parts.len() == 4 { n(3)? } else { 1 },
                }
            }
            "relu" => Layer::Relu,
            "maxpool" => {
                arity(&[2])?;
                Layer::MaxPool(n(1)?)
            }
            "avgpool" => {
                arity(&[2])?;
                Layer::AvgPool(n(1)?)
            }
            "att" => {
                arity(&[2])?;
                Layer::Attention { kernel: n(1)? }
            }
            "gap" => Layer::GlobalAvgPool,
            "flatten" => Layer::Flatten,
            "dense" => {
                arity(&[2])?;
                Layer::Dense { out: n(1)? }
            }
            other => return Err(Error::Spec(format!("unknown layer `{other}`"))),
        };
        if matches!(layer, Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten) {
            arity(&[1])?;
        }
        Ok(layer)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::AttentionClassifier => "attention_classifier",
            Variant::Predictor => "predictor",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "attention_classifier" => Ok(Variant::AttentionClassifier),
            "predictor" => Ok(Variant::Predictor),
            other => Err(Error::Spec(format!("unknown variant `{other}`"))),
        }
    }
}

/// Activation shape after a layer: (channels, height, width) or flat features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    pub fn new(variant: Variant, layers: Vec<Layer>) -> Self {
        ModelSpec { variant, layers }
    }

    pub fn parse(variant: Variant, layers: &str) -> Result<Self> {
        let layers = layers
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSpec { variant, layers })
    }

    pub fn default_attention_classifier() -> Self {
        Self::parse(Variant::AttentionClassifier, DEFAULT_ATTENTION_LAYERS).expect("default spec parses")
    }

    pub fn default_predictor() -> Self {
        Self::parse(Variant::Predictor, DEFAULT_PREDICTOR_LAYERS).expect("default spec parses")
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(Layer::to_string).collect::<Vec<_>>().join(", ")
    }

    /// Plain-text `[model]` section used in checkpoints and configs.
    pub fn to_section(&self) -> String {
        format!("[model]\nvariant = {}\nlayers = {}\n", self.variant, self.layers_string())
    }

    pub fn from_section(text: &str) -> Result<Self> {
        let mut variant = None;
        let mut layers = None;
        let mut in_model = false;
        for line in text.lines().map(str::trim) {
            if line.starts_with('[') {
                in_model = line == "[model]";
                continue;
            }
            if !in_model {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "variant" => variant = Some(v.trim().parse()?),
                    "layers" => layers = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        let (Some(variant), Some(layers)) = (variant, layers) else {
            return Err(Error::Spec("metadata lacks a [model] section with variant and layers".into()));
        };
        let spec = Self::parse(variant, &layers)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Walks the layer chain from a 1×48×48 input; returns the parameter count.
    pub fn validate(&self) -> Result<usize> {
        let mut shape = Shape::Map(1, HEIGHT, WIDTH);
        let mut params = 0;
        let mut attention = 0;
        for (idx, layer) in self.layers.iter().enumerate() {
            let underflow = |what: String| Error::Spec(format!("layer {idx} ({layer}): {what}"));
            shape = match (*layer, shape) {
                (Layer::Conv { out, kernel, stride }, Shape::Map(c, h, w)) => {
                    let pad = (kernel - 1) / 2;
                    let oh = conv_output_extent(h, kernel, stride, pad);
                    let ow = conv_output_extent(w, kernel, stride, pad);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(underflow(format!("kernel does not fit {h}x{w} (spatial underflow)")));
                    };
                    params += out * c * kernel * kernel + out;
                    Shape::Map(out, oh, ow)
                }
                (Layer::MaxPool(s) | Layer::AvgPool(s), Shape::Map(c, h, w)) => {
                    if s > h || s > w || h % s != 0 || w % s != 0 {
                        return Err(underflow(format!(
                            "pool {s} does not evenly tile {h}x{w} (spatial underflow)"
                        )));
                    }
                    Shape::Map(c, h / s, w / s)
                }
                (Layer::Attention { kernel }, Shape::Map(c, h, w)) => {
                    if kernel % 2 == 0 {
                        return Err(underflow("attention kernel must be odd".into()));
                    }
                    attention += 1;
                    params += 2 * kernel * kernel + 1;
                    Shape::Map(c, h, w)
                }
                (Layer::Relu, s) => s,
                (Layer::GlobalAvgPool, Shape::Map(c, _, _)) => Shape::Flat(c),
                (Layer::Flatten, Shape::Map(c, h, w)) => Shape::Flat(c * h * w),
                (Layer::Flatten, Shape::Flat(f)) => Shape::Flat(f),
                (Layer::Dense { out }, Shape::Flat(f)) => {
                    params += out * f + out;
                    Shape::Flat(out)
                }
                (l, s) => return Err(Error::Spec(format!("layer {idx} ({l}) cannot follow shape {s:?}"))),
            };
        }
        if shape != Shape::Flat(NUM_CLASSES) {
            return Err(Error::Spec(format!(
                "network must end in {NUM_CLASSES} flat outputs, ends in {shape:?}"
            )));
        }
        if self.variant == Variant::AttentionClassifier && attention == 0 {
            return Err(Error::Spec("attention_classifier needs at least one att layer".into()));
        }
        Ok(params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
}

/// Tape handles of a bound forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Attention maps (Bx1xhxw) in layer order.
    pub attention: Vec<Var>,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut channels = 1;
    let mut flat = 0;
    let he = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
    };
    let mut extent = (HEIGHT, WIDTH);
    for (idx, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Conv { out, kernel, stride } => {
                let pad = (kernel - 1) / 2;
                params.push(Param {
                    name: format!("l{idx}.conv.weight"),
                    tensor: he(&[out, channels, kernel, kernel], channels * kernel * kernel, &mut rng),
                });
                params.push(Param {
                    name: format!("l{idx}.conv.bias"),
                    tensor: Tensor::zeros(&[out]),
                });
                channels = out;
                extent = (
                    conv_output_extent(extent.0, kernel, stride, pad).expect("validated"),
                    conv_output_extent(extent.1, kernel, stride, pad).expect("validated"),
                );
            }
            Layer::MaxPool(s) | Layer::AvgPool(s) => extent = (extent.0 / s, extent.1 / s),
            Layer::Attention { kernel } => {
                params.push(Param {
                    name: format!("l{idx}.att.weight"),
                    tensor: he(&[1, 2, kernel, kernel], 2 * kernel * kernel, &mut rng),
                });
                params.push(Param {
                    name: format!("l{idx}.att.bias"),
                    tensor: Tensor::zeros(&[1]),
                });
            }
            Layer::GlobalAvgPool => flat = channels,
            Layer::Flatten => {
                if flat == 0 {
                    flat = channels * extent.0 * extent.1;
                }
            }
            Layer::Dense { out } => {
                params.push(Param {
                    name: format!("l{idx}.dense.weight"),
                    tensor: he(&[out, flat], flat, &mut rng),
                });
                params.push(Param {
                    name: format!("l{idx}.dense.bias"),
                    tensor: Tensor::zeros(&[out]),
                });
                flat = out;
            }
            Layer::Relu => {}
        }
    }
    Ok(Model { spec: spec.clone(), params })
}

/// Stacks images into a Bx1x48x48 tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        data.extend_from_slice(img.pixels());
        n += 1;
    }
    Tensor::from_raw(vec![n.max(1), 1, HEIGHT, WIDTH], if n == 0 { vec![0.0; HEIGHT * WIDTH] } else { data })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Registers every parameter on the tape, in `params` order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.zero_grad();
                tape.leaf(t.requires_grad(trainable))
            })
            .collect()
    }

    /// Runs the network. With `stop_after_attention`, stops after the last attention layer
    /// and returns its map as `logits` too.
    fn run(&self, tape: &mut Tape, input: Var, bound: &[Var], stop_after_attention: bool) -> Result<Forward> {
        if bound.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for a model with {}",
                bound.len(),
                self.params.len()
            )));
        }
        let last_att = self
            .spec
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Attention { .. }));
        let mut x = input;
        let mut next = 0;
        let mut attention = Vec::new();
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            x = match *layer {
                Layer::Conv { kernel, stride, .. } => {
                    let (w, b) = (bound[next], bound[next + 1]);
                    next += 2;
                    tape.conv2d(x, w, b, stride, (kernel - 1) / 2)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool(s) => tape.maxpool2d(x, s)?,
                Layer::AvgPool(s) => tape.avgpool2d(x, s)?,
                Layer::Attention { .. } => {
                    let module = SpatialAttentionModule::new(tape, bound[next], bound[next + 1])?;
                    next += 2;
                    let (gated, map) = spatial_attention_forward(tape, x, &module)?;
                    attention.push(map);
                    if stop_after_attention && Some(idx) == last_att {
                        return Ok(Forward { logits: map, attention });
                    }
                    gated
                }
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Flatten => {
                    if tape.value(x).shape().len() == 2 {
                        x
                    } else {
                        tape.flatten(x)?
                    }
                }
                Layer::Dense { .. } => {
                    let (w, b) = (bound[next], bound[next + 1]);
                    next += 2;
                    tape.dense(x, w, b)?
                }
            };
        }
        Ok(Forward { logits: x, attention })
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, bound: &[Var]) -> Result<Forward> {
        self.run(tape, input, bound, false)
    }

    /// Logits for a Bx1x48x48 batch without recording gradients.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.leaf(batch.clone())?;
        let out = self.forward(&mut tape, x, &bound)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax probabilities, one row per image.
    pub fn predict_proba(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(&images_to_tensor(images.iter().copied()))?;
        Ok(logits
            .data()
            .chunks(NUM_CLASSES)
            .take(images.len())
            .map(|row| softmax_row(row).0)
            .collect())
    }

    /// The last attention layer's map for each image, at its native resolution.
    pub fn raw_attention(&self, images: &[&GrayImage]) -> Result<(Vec<Vec<f64>>, usize, usize)> {
        if self.spec.variant != Variant::AttentionClassifier {
            return Err(Error::Variant("attention extraction needs an attention_classifier".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.leaf(images_to_tensor(images.iter().copied()))?;
        let out = self.run(&mut tape, x, &bound, true)?;
        let map = tape.value(out.logits);
        let (h, w) = (map.shape()[2], map.shape()[3]);
        Ok((map.data().chunks(h * w).take(images.len()).map(<[f64]>::to_vec).collect(), h, w))
    }

    /// Adds the tape's gradients for the bound parameters into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn to_checkpoint(&self, extra_metadata: &str) -> Checkpoint {
        Checkpoint::new(
            format!("{}{extra_metadata}", self.spec.to_section()),
            self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let spec = ModelSpec::from_section(&ckpt.metadata)?;
        let template = build_model(&spec, 0)?;
        let mut params = Vec::with_capacity(template.params.len());
        for p in template.params {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, spec wants {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            params.push(Param {
                name: p.name,
                tensor: t.clone(),
            });
        }
        Ok(Model { spec, params })
    }
}

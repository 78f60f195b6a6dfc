//! Spatial attention gate.
//!
//! The gate pools the feature map across channels (max and mean), convolves
//! the two pooled planes with a single odd-sized kernel, and squashes the
//! result through a sigmoid. The features are multiplied by that map.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Parameters of one gate, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionModule {
    /// Shape 1×2×k×k; input channel 0 sees the channel max, 1 the channel mean.
    pub kernel: Var,
    pub bias: Var,
    pub kernel_size: usize,
}

impl SpatialAttentionModule {
    pub fn new(tape: &Tape, kernel: Var, bias: Var) -> Result<Self> {
        let shape = tape.value(kernel).shape();
        match *shape {
            [1, 2, kh, kw] if kh == kw && kh % 2 == 1 => Ok(SpatialAttentionModule {
                kernel,
                bias,
                kernel_size: kh,
            }),
            _ => Err(Error::Shape(format!(
                "attention kernel must be 1x2xkxk with odd k, got {shape:?}"
            ))),
        }
    }
}

/// Returns `(gated features, attention map)`; the map is Bx1xHxW with entries in (0, 1).
pub fn spatial_attention_forward(
    tape: &mut Tape,
    features: Var,
    module: &SpatialAttentionModule,
) -> Result<(Var, Var)> {
    let max = tape.channel_max(features)?;
    let mean = tape.channel_mean(features)?;
    let pooled = tape.concat_channels(max, mean)?;
    let pad = (module.kernel_size - 1) / 2;
    let logits = tape.conv2d(pooled, module.kernel, module.bias, 1, pad)?;
    let map = tape.sigmoid(logits)?;
    let gated = tape.gate(features, map)?;
    Ok((gated, map))
}

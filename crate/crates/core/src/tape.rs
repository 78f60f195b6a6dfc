//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Every op appends one node whose inputs precede it, so walking node indices
//! from the loss down to zero is a reverse topological order. A tape can be
//! differentiated once; a second `backward` call is rejected with
//! [`Error::Contract`]. Leaf gradients accumulate onto whatever gradient the
//! leaf tensor already carried.

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        // im2col buffers per batch item, kept only when the kernel needs a gradient.
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        size: usize,
    },
    Reshape(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ConcatChannels(Var, Var),
    Gate {
        features: Var,
        map: Var,
    },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Select {
        input: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(Error::Shape(format!("{what} expects a 4-D tensor, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        &[b, f] => Ok([b, f]),
        s => Err(Error::Shape(format!("{what} expects a 2-D tensor, got {s:?}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output extent of a strided window op.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) {
            check_finite(value.data(), "op output")?;
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.is_requires_grad()
    }

    /// Gradient of the differentiated loss with respect to `v`, once `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a leaf tensor (with its accumulated gradient) back out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Registers an input. Non-finite data is rejected here so every op sees finite operands.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        check_finite(tensor.data(), "leaf tensor")?;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.requires_grad(false))
    }

    fn out(&self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Tensor {
        let rg = inputs.iter().any(|&v| self.rg(v));
        Tensor::from_raw(shape, data).requires_grad(rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [batch, in_c, in_h, in_w] = dims4(self.value(input), "conv2d input")?;
        let [out_c, k_c, k_h, k_w] = dims4(self.value(kernel), "conv2d kernel")?;
        if k_c != in_c {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {k_c} input channels, input has {in_c}"
            )));
        }
        if self.value(bias).shape() != [out_c] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} does not match {out_c} output channels",
                self.value(bias).shape()
            )));
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_extent(in_h, k_h, stride, padding),
            conv_output_extent(in_w, k_w, stride, padding),
        ) else {
            return Err(Error::Shape(format!(
                "conv2d kernel {k_h}x{k_w} (stride {stride}, padding {padding}) does not fit input {in_h}x{in_w}"
            )));
        };
        let geom = ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad: padding,
            out_h,
            out_w,
        };
        let rows = geom.col_rows();
        let positions = geom.positions();
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let keep_cols = self.rg(kernel);
        let mut cols_all = if keep_cols {
            Vec::with_capacity(batch * rows * positions)
        } else {
            Vec::new()
        };
        let mut cols = vec![0.0; rows * positions];
        let mut out = vec![0.0; batch * out_c * positions];
        for n in 0..batch {
            im2col(&geom, &x[n * in_c * in_h * in_w..(n + 1) * in_c * in_h * in_w], &mut cols);
            let out_n = &mut out[n * out_c * positions..(n + 1) * out_c * positions];
            for o in 0..out_c {
                let row_out = &mut out_n[o * positions..(o + 1) * positions];
                row_out.fill(b[o]);
                for k in 0..rows {
                    let wk = w[o * rows + k];
                    if wk == 0.0 {
                        continue;
                    }
                    let col = &cols[k * positions..(k + 1) * positions];
                    for (y, c) in row_out.iter_mut().zip(col) {
                        *y += wk * c;
                    }
                }
            }
            if keep_cols {
                cols_all.extend_from_slice(&cols);
            }
        }
        let value = self.out(vec![batch, out_c, out_h, out_w], out, &[input, kernel, bias]);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols: cols_all,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = self.out(t.shape().to_vec(), data, &[input]);
        self.push(value, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = self.out(t.shape().to_vec(), data, &[input]);
        self.push(value, Op::Sigmoid(input))
    }

    /// Non-overlapping `size`x`size` max pooling; trailing rows/columns are dropped.
    pub fn maxpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(input), "maxpool2d")?;
        let (oh, ow) = pooled_extent(h, w, size)?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * size * w + oj * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (oi * size + di) * w + oj * size + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = self.out(vec![b, c, oh, ow], out, &[input]);
        self.push(value, Op::MaxPool { input, argmax })
    }

    pub fn avgpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(input), "avgpool2d")?;
        let (oh, ow) = pooled_extent(h, w, size)?;
        let x = self.value(input).data();
        let norm = 1.0 / (size * size) as f64;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..size {
                        for dj in 0..size {
                            acc += x[base + (oi * size + di) * w + oj * size + dj];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        let value = self.out(vec![b, c, oh, ow], out, &[input]);
        self.push(value, Op::AvgPool { input, size })
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let b = t.shape()[0];
        let f = t.numel() / b;
        let value = self.out(vec![b, f], t.data().to_vec(), &[input]);
        self.push(value, Op::Reshape(input))
    }

    /// `input` is BxF, `weight` is OxF, `bias` is O; computes `input · weightᵀ + bias`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, f] = dims2(self.value(input), "dense input")?;
        let [o, wf] = dims2(self.value(weight), "dense weight")?;
        if wf != f {
            return Err(Error::Shape(format!(
                "dense weight expects {wf} features, input has {f}"
            )));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?} does not match {o} outputs",
                self.value(bias).shape()
            )));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bias_v = self.value(bias).data();
        let mut out = Vec::with_capacity(b * o);
        for n in 0..b {
            let row = &x[n * f..(n + 1) * f];
            for j in 0..o {
                out.push(bias_v[j] + dot(row, &w[j * f..(j + 1) * f]));
            }
        }
        let value = self.out(vec![b, o], out, &[input, weight, bias]);
        self.push(value, Op::Dense { input, weight, bias })
    }

    /// Max over channels, BxCxHxW -> Bx1xHxW. Ties resolve to the lowest channel.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(input), "channel_max")?;
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * hw);
        let mut argmax = Vec::with_capacity(b * hw);
        for n in 0..b {
            for p in 0..hw {
                let mut best = n * c * hw + p;
                for ch in 1..c {
                    let idx = (n * c + ch) * hw + p;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let value = self.out(vec![b, 1, h, w], out, &[input]);
        self.push(value, Op::ChannelMax { input, argmax })
    }

    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(input), "channel_mean")?;
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = vec![0.0; b * hw];
        for n in 0..b {
            let o = &mut out[n * hw..(n + 1) * hw];
            for ch in 0..c {
                let plane = &x[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                o.iter_mut().zip(plane).for_each(|(o, v)| *o += v);
            }
            o.iter_mut().for_each(|v| *v /= c as f64);
        }
        let value = self.out(vec![b, 1, h, w], out, &[input]);
        self.push(value, Op::ChannelMean(input))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.value(a), "concat_channels")?;
        let [nb, cb, hb, wb] = dims4(self.value(b), "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&xa[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&xb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = self.out(vec![n, ca + cb, h, w], out, &[a, b]);
        self.push(value, Op::ConcatChannels(a, b))
    }

    /// Multiplies BxCxHxW features by a Bx1xHxW map broadcast over channels.
    pub fn gate(&mut self, features: Var, map: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(features), "gate features")?;
        if self.value(map).shape() != [b, 1, h, w] {
            return Err(Error::Shape(format!(
                "gate map shape {:?} does not match features {:?}",
                self.value(map).shape(),
                self.value(features).shape()
            )));
        }
        let (x, m) = (self.value(features).data(), self.value(map).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(x.len());
        for n in 0..b {
            let mp = &m[n * hw..(n + 1) * hw];
            for ch in 0..c {
                let plane = &x[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                out.extend(plane.iter().zip(mp).map(|(v, g)| v * g));
            }
        }
        let value = self.out(vec![b, c, h, w], out, &[features, map]);
        self.push(value, Op::Gate { features, map })
    }

    /// Mean over the spatial extent, BxCxHxW -> BxC.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(input), "global_avg_pool")?;
        let x = self.value(input).data();
        let hw = h * w;
        let out = (0..b * c)
            .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = self.out(vec![b, c], out, &[input]);
        self.push(value, Op::GlobalAvgPool(input))
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax of BxK `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, k] = dims2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside 0..{k}")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            let row = &z[n * k..(n + 1) * k];
            let (p, lse) = softmax_row(row);
            loss += lse - row[label];
            probs.extend(p);
        }
        let value = self.out(vec![1], vec![loss / b as f64], &[logits]);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        let value = self.out(vec![1], vec![s], &[input]);
        self.push(value, Op::Sum(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "add", |x, y| x + y)?;
        let value = self.out(self.value(a).shape().to_vec(), data, &[a, b]);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let value = self.out(self.value(a).shape().to_vec(), data, &[a, b]);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = self.out(t.shape().to_vec(), data, &[input]);
        self.push(value, Op::Scale(input, factor))
    }

    /// Picks one element (by flat index) as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let t = self.value(input);
        let Some(&v) = t.data().get(index) else {
            return Err(Error::Index(format!(
                "flat index {index} outside tensor of {} elements",
                t.numel()
            )));
        };
        let value = self.out(vec![1], vec![v], &[input]);
        self.push(value, Op::Select { input, index })
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    /// Differentiates the scalar `loss`, accumulating into every requires-grad ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "tape was already differentiated; record a new tape".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            for (input, delta) in self.local_grads(i, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input that requires a gradient.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.col_rows();
                let positions = geom.positions();
                let per_out = geom.out_c * positions;
                if self.rg(*bias) {
                    let mut db = vec![0.0; geom.out_c];
                    for n in 0..geom.batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += g[n * per_out + o * positions..n * per_out + (o + 1) * positions]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    out.push((*bias, db));
                }
                if self.rg(*kernel) {
                    let mut dw = vec![0.0; geom.out_c * rows];
                    for n in 0..geom.batch {
                        let cols_n = &cols[n * rows * positions..(n + 1) * rows * positions];
                        for o in 0..geom.out_c {
                            let go = &g[n * per_out + o * positions..n * per_out + (o + 1) * positions];
                            for k in 0..rows {
                                dw[o * rows + k] += dot(go, &cols_n[k * positions..(k + 1) * positions]);
                            }
                        }
                    }
                    out.push((*kernel, dw));
                }
                if self.rg(*input) {
                    let w = self.value(*kernel).data();
                    let in_plane = geom.in_c * geom.in_h * geom.in_w;
                    let mut dx = vec![0.0; geom.batch * in_plane];
                    let mut dcols = vec![0.0; rows * positions];
                    for n in 0..geom.batch {
                        dcols.fill(0.0);
                        for o in 0..geom.out_c {
                            let go = &g[n * per_out + o * positions..n * per_out + (o + 1) * positions];
                            for k in 0..rows {
                                let wk = w[o * rows + k];
                                if wk == 0.0 {
                                    continue;
                                }
                                let dc = &mut dcols[k * positions..(k + 1) * positions];
                                dc.iter_mut().zip(go).for_each(|(d, gv)| *d += wk * gv);
                            }
                        }
                        col2im(geom, &dcols, &mut dx[n * in_plane..(n + 1) * in_plane]);
                    }
                    out.push((*input, dx));
                }
            }
            Op::Relu(input) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect();
                out.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect();
                out.push((*input, dx));
            }
            Op::MaxPool { input, argmax } | Op::ChannelMax { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                out.push((*input, dx));
            }
            Op::AvgPool { input, size } => {
                let shape = self.value(*input).shape();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / size, w / size);
                let norm = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; self.value(*input).numel()];
                for plane in 0..shape[0] * shape[1] {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let gv = g[(plane * oh + oi) * ow + oj] * norm;
                            for di in 0..*size {
                                for dj in 0..*size {
                                    dx[plane * h * w + (oi * size + di) * w + oj * size + dj] += gv;
                                }
                            }
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Reshape(input) => out.push((*input, g.to_vec())),
            Op::Dense { input, weight, bias } => {
                let [b, f] = [self.value(*input).shape()[0], self.value(*input).shape()[1]];
                let o = self.value(*weight).shape()[0];
                if self.rg(*bias) {
                    let mut db = vec![0.0; o];
                    for n in 0..b {
                        db.iter_mut().zip(&g[n * o..(n + 1) * o]).for_each(|(d, gv)| *d += gv);
                    }
                    out.push((*bias, db));
                }
                if self.rg(*weight) {
                    let x = self.value(*input).data();
                    let mut dw = vec![0.0; o * f];
                    for n in 0..b {
                        let row = &x[n * f..(n + 1) * f];
                        for j in 0..o {
                            let gv = g[n * o + j];
                            dw[j * f..(j + 1) * f].iter_mut().zip(row).for_each(|(d, xv)| *d += gv * xv);
                        }
                    }
                    out.push((*weight, dw));
                }
                if self.rg(*input) {
                    let w = self.value(*weight).data();
                    let mut dx = vec![0.0; b * f];
                    for n in 0..b {
                        let drow = &mut dx[n * f..(n + 1) * f];
                        for j in 0..o {
                            let gv = g[n * o + j];
                            drow.iter_mut().zip(&w[j * f..(j + 1) * f]).for_each(|(d, wv)| *d += gv * wv);
                        }
                    }
                    out.push((*input, dx));
                }
            }
            Op::ChannelMean(input) => {
                let shape = self.value(*input).shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dx = Vec::with_capacity(b * c * hw);
                for n in 0..b {
                    let gp = &g[n * hw..(n + 1) * hw];
                    for _ in 0..c {
                        dx.extend(gp.iter().map(|v| v / c as f64));
                    }
                }
                out.push((*input, dx));
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.value(*a).shape();
                let cb = self.value(*b).shape()[1];
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.rg(*a) {
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    out.push((*b, db));
                }
            }
            Op::Gate { features, map } => {
                let shape = self.value(*features).shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let x = self.value(*features).data();
                let m = self.value(*map).data();
                if self.rg(*features) {
                    let mut dx = Vec::with_capacity(x.len());
                    for n in 0..b {
                        let mp = &m[n * hw..(n + 1) * hw];
                        for ch in 0..c {
                            let gp = &g[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                            dx.extend(gp.iter().zip(mp).map(|(gv, mv)| gv * mv));
                        }
                    }
                    out.push((*features, dx));
                }
                if self.rg(*map) {
                    let mut dm = vec![0.0; b * hw];
                    for n in 0..b {
                        let dmp = &mut dm[n * hw..(n + 1) * hw];
                        for ch in 0..c {
                            let off = (n * c + ch) * hw;
                            for p in 0..hw {
                                dmp[p] += g[off + p] * x[off + p];
                            }
                        }
                    }
                    out.push((*map, dm));
                }
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape();
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(self.value(*input).numel());
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                out.push((*input, dx));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    dz[n * k + l] -= scale;
                }
                out.push((*logits, dz));
            }
            Op::Sum(input) => out.push((*input, vec![g[0]; self.value(*input).numel()])),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(xb).map(|(g, y)| g * y).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(xa).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(input, factor) => out.push((*input, g.iter().map(|v| v * factor).collect())),
            Op::Select { input, index } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                dx[*index] = g[0];
                out.push((*input, dx));
            }
        }
        out.retain(|(v, _)| self.rg(*v));
        out
    }

    /// Whether `v` was produced by a leaf registration.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.node(v).op, Op::Leaf)
    }
}

fn pooled_extent(h: usize, w: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::Shape(format!("pool window {size} does not fit {h}x{w}")));
    }
    Ok((h / size, w / size))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction; also returns log-sum-exp of the row.
pub fn softmax_row(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / total).collect(), max + total.ln())
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.in_w..(ii as usize + 1) * g.in_w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.in_w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.in_h as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.in_w as isize {
                            plane[ii as usize * g.in_w + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64 * 0.1).collect();
        let x = tape.leaf(t(&[2, 1, 3, 4], &data)).unwrap();
        let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = tape.leaf(t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 3, 4]);
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_same_padding_keeps_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 48, 48])).unwrap();
        let k = tape.leaf(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 48, 48]);
        assert_eq!(conv_output_extent(48, 3, 2, 1), Some(24));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        let big = tape.leaf(Tensor::zeros(&[1, 2, 7, 7])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Shape(_))));
        assert!(matches!(tape.conv2d(x, big, b, 1, 0), Err(Error::Shape(_))));
        assert!(matches!(tape.conv2d(x, big, b, 1, 1), Err(Error::Shape(_))));
        assert!(tape.conv2d(x, big, b, 1, 2).is_ok());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::new();
        let mut bad = Tensor::zeros(&[1, 1, 2, 2]);
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(tape.leaf(bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, -3.0, 2.0])).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: f64 = rng.random_range(-40.0..40.0);
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[2], &[v, -v])).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let d = tape.value(s).data();
            assert!((d[0] + d[1] - 1.0).abs() < 1e-15);
            assert!(d[0] > 0.0 && d[0] < 1.0 || v.abs() > 36.0);
        }
    }

    #[test]
    fn pooling_and_dense() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = tape.maxpool2d(x, 2).unwrap();
        let a = tape.avgpool2d(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        assert_eq!(tape.value(a).data(), &[2.5]);

        let v = [0.5, -1.0, 2.0, 0.25];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let two = tape.leaf(t(&[1, 2, 2, 2], &[v.as_slice(), neg.as_slice()].concat())).unwrap();
        let mean = tape.channel_mean(two).unwrap();
        assert!(tape.value(mean).data().iter().all(|&x| x == 0.0));
        let mx = tape.channel_max(two).unwrap();
        assert_eq!(tape.value(mx).data(), &[0.5, 1.0, 2.0, 0.25]);

        let input = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, -6.0])).unwrap();
        let eye = tape.leaf(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let zero = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let y = tape.dense(input, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(input).data());

        let flat = tape.flatten(two).unwrap();
        assert_eq!(tape.value(flat).shape(), &[1, 8]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 7])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0, 6]).unwrap();
        assert!((tape.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 7];
        sat[0] = 1000.0;
        let z = tape.leaf(t(&[1, 7], &sat)).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);

        let z = tape.leaf(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.3133).abs() < 1e-4);

        assert!(matches!(tape.softmax_cross_entropy(z, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn softmax_rows_normalized_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let row: Vec<f64> = (0..7).map(|_| rng.random_range(-1e3..1e3)).collect();
            let (p, lse) = softmax_row(&row);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(lse.is_finite());
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = random(&[2, 3, 4], &mut rng).requires_grad(true);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone()).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(x0.data()) {
            assert!((g - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]).requires_grad(true)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn leaf_gradient_accumulates_on_existing_grad() {
        let mut p = Tensor::zeros(&[2]).requires_grad(true);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(p).unwrap();
            let s = tape.sum(x).unwrap();
            tape.backward(s).unwrap();
            p = tape.take(x);
        }
        assert_eq!(p.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xa = random(&[2, 3, 7, 6], &mut rng);
        let xb = random(&[2, 3, 7, 6], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let (a, b) = (1.7, -0.6);
        let combo: Vec<f64> = xa.data().iter().zip(xb.data()).map(|(x, y)| a * x + b * y).collect();
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(x).unwrap();
            let kv = tape.leaf(k.clone()).unwrap();
            let bias = tape.leaf(Tensor::zeros(&[4])).unwrap();
            let y = tape.conv2d(x, kv, bias, 2, 1).unwrap();
            tape.value(y).data().to_vec()
        };
        let lhs = run(t(&[2, 3, 7, 6], &combo));
        let (ya, yb) = (run(xa), run(xb));
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * ya[i] + b * yb[i])).abs() < 1e-9);
        }
    }

    type OpFn = fn(&mut Tape, Var) -> Result<Var>;

    /// Each differentiable op composed with a fixed random projection, so the
    /// scalar objective exercises every output coordinate.
    fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
        vec![
            ("relu", vec![2, 3, 4, 4], |t, x| t.relu(x)),
            ("sigmoid", vec![2, 3, 4, 4], |t, x| t.sigmoid(x)),
            ("maxpool", vec![2, 2, 6, 5], |t, x| t.maxpool2d(x, 2)),
            ("avgpool", vec![2, 2, 6, 5], |t, x| t.avgpool2d(x, 2)),
            ("flatten", vec![2, 2, 3, 3], |t, x| t.flatten(x)),
            ("channel_max", vec![2, 3, 4, 4], |t, x| t.channel_max(x)),
            ("channel_mean", vec![2, 3, 4, 4], |t, x| t.channel_mean(x)),
            ("global_avg_pool", vec![2, 3, 4, 4], |t, x| t.global_avg_pool(x)),
            ("concat", vec![2, 2, 3, 3], |t, x| {
                let y = t.sigmoid(x)?;
                t.concat_channels(x, y)
            }),
            ("gate", vec![2, 3, 4, 4], |t, x| {
                let m = t.channel_mean(x)?;
                let m = t.sigmoid(m)?;
                t.gate(x, m)
            }),
            ("mul_add_scale", vec![3, 4], |t, x| {
                let s = t.sigmoid(x)?;
                let p = t.mul(x, s)?;
                let q = t.add(p, x)?;
                t.scale(q, -0.7)
            }),
        ]
    }

    fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let w = random(&shape, &mut rng);
        let w = tape.constant(w)?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (name, shape, op) in op_cases() {
                let x = random(&shape, &mut rng);
                let err = finite_difference_check(
                    |tape, x| {
                        let y = op(tape, x)?;
                        project(tape, y, seed)
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
            }
        }
    }

    #[test]
    fn conv_dense_ce_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random(&[2, 2, 6, 5], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let check = |which: usize, probe: &Tensor| {
                finite_difference_check(
                    |tape, v| {
                        let mut args = [None; 3];
                        args[which] = Some(v);
                        let xv = args[0].map_or_else(|| tape.constant(x.clone()), Ok)?;
                        let kv = args[1].map_or_else(|| tape.constant(k.clone()), Ok)?;
                        let bv = args[2].map_or_else(|| tape.constant(b.clone()), Ok)?;
                        let y = tape.conv2d(xv, kv, bv, 2, 1)?;
                        project(tape, y, seed)
                    },
                    probe,
                    1e-5,
                )
                .unwrap()
            };
            assert!(check(0, &x) < 1e-4);
            assert!(check(1, &k) < 1e-4);
            assert!(check(2, &b) < 1e-4);

            let w = random(&[4, 5], &mut rng);
            let bias = random(&[4], &mut rng);
            let input = random(&[3, 5], &mut rng);
            let err = finite_difference_check(
                |tape, wv| {
                    let iv = tape.constant(input.clone())?;
                    let bv = tape.constant(bias.clone())?;
                    let z = tape.dense(iv, wv, bv)?;
                    tape.softmax_cross_entropy(z, &[0, 3, 1])
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "dense+ce seed {seed}: {err}");
            let err = finite_difference_check(
                |tape, iv| {
                    let wv = tape.constant(w.clone())?;
                    let bv = tape.constant(bias.clone())?;
                    let z = tape.dense(iv, wv, bv)?;
                    let s = tape.select(z, 5)?;
                    tape.scale(s, 2.0)
                },
                &input,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "dense+select seed {seed}: {err}");
        }
    }

    #[test]
    fn random_three_layer_network_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 1, 8, 8], &mut rng);
            let k1 = random(&[3, 1, 3, 3], &mut rng);
            let k2 = random(&[4, 3, 3, 3], &mut rng);
            let w = random(&[5, 4], &mut rng);
            let err = finite_difference_check(
                |tape, k2v| {
                    let xv = tape.constant(x.clone())?;
                    let k1v = tape.constant(k1.clone())?;
                    let b1 = tape.constant(Tensor::zeros(&[3]))?;
                    let b2 = tape.constant(Tensor::zeros(&[4]))?;
                    let wv = tape.constant(w.clone())?;
                    let bw = tape.constant(Tensor::zeros(&[5]))?;
                    let h = tape.conv2d(xv, k1v, b1, 1, 1)?;
                    let h = tape.relu(h)?;
                    let h = tape.maxpool2d(h, 2)?;
                    let h = tape.conv2d(h, k2v, b2, 1, 1)?;
                    let h = tape.sigmoid(h)?;
                    let h = tape.global_avg_pool(h)?;
                    let z = tape.dense(h, wv, bw)?;
                    tape.softmax_cross_entropy(z, &[1, 4])
                },
                &k2,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}

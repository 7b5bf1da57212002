//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and accumulates vector-Jacobian products. Nodes whose
//! inputs never reach a trainable parameter are skipped, so a frozen backbone
//! costs nothing on the way back.
//!
//! Layouts: dense inputs are `(batch, features)`, linear weights are
//! `(out, in)`, feature maps are `(batch, channels, height, width)` and conv
//! kernels are `(out_channels, in_channels, k, k)`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param {
        name: String,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Fuse {
        base: Var,
        donor: Var,
        from_donor: Vec<bool>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    SoftmaxXent {
        z: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf; never receives gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A named parameter leaf. Gradients are only propagated toward it when
    /// `requires_grad` is set.
    pub fn param(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        self.push(
            value,
            Op::Param {
                name: name.to_string(),
            },
            requires_grad,
        )
    }

    /// Parameter leaves in tape order.
    pub fn params(&self) -> impl Iterator<Item = (Var, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param { name } => Some((Var(i), name.as_str())),
                _ => None,
            })
    }

    /// `y = x wᵀ + b` with `x: (batch, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) {
            return Err(Error::shape(
                "linear input",
                &[
                    xv.shape().first().copied().unwrap_or(0),
                    wv.shape().get(1).copied().unwrap_or(0),
                ],
                xv.shape(),
            ));
        }
        let (batch, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
        if let Some(b) = b {
            self.value(b).ensure_shape("linear bias", &[dout])?;
        }
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0f32; batch * dout];
        for r in 0..batch {
            let xr = &xd[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                out[r * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..batch {
                for o in 0..dout {
                    out[r * dout + o] += bd[o];
                }
            }
        }
        let value = Tensor::new(vec![batch, dout], out)?;
        check_finite(&value, "linear")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Stride-1 square convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != wv.dim(3) || xv.dim(1) != wv.dim(1) {
            return Err(Error::shape(
                "conv2d input",
                &[0, wv.shape().get(1).copied().unwrap_or(0), 0, 0],
                xv.shape(),
            ));
        }
        let (batch, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape(
                "conv2d spatial extent",
                &[k, k],
                &[h + 2 * padding, wd + 2 * padding],
            ));
        }
        if let Some(b) = b {
            self.value(b).ensure_shape("conv2d bias", &[cout])?;
        }
        let (oh, ow) = (h + 2 * padding - k + 1, wd + 2 * padding - k + 1);
        let (xd, kd) = (xv.data(), wv.data());
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0f32; batch * cout * oh * ow];
        for n in 0..batch {
            for co in 0..cout {
                let b0 = bias.as_ref().map_or(0.0, |b| b[co]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..cin {
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < padding || iy - padding >= h {
                                    continue;
                                }
                                let iy = iy - padding;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < padding || ix - padding >= wd {
                                        continue;
                                    }
                                    let ix = ix - padding;
                                    acc += xd[((n * cin + ci) * h + iy) * wd + ix]
                                        * kd[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((n * cout + co) * oh + oy) * ow + ox] = acc + b0;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        check_finite(&value, "conv2d")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, padding }, rg))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || xv.dim(2) < 2 || xv.dim(3) < 2 {
            return Err(Error::shape("max_pool2 input", &[0, 0, 2, 2], xv.shape()));
        }
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![batch, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Mean over the two spatial axes: `(batch, c, h, w) -> (batch, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape(
                "global_avg_pool input",
                &[0, 0, 0, 0],
                xv.shape(),
            ));
        }
        let (batch, c, hw) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
        let data = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(vec![batch, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Channel substitution: output channel `c` is copied from `donor` when
    /// `from_donor[c]` is set and from `base` otherwise. No values are blended.
    pub fn fuse(&mut self, base: Var, donor: Var, from_donor: &[bool]) -> Result<Var> {
        let (bv, dv) = (self.value(base), self.value(donor));
        if bv.rank() != 4 {
            return Err(Error::shape(
                "fuse base",
                &[0, from_donor.len(), 0, 0],
                bv.shape(),
            ));
        }
        dv.ensure_shape("fuse donor", bv.shape())?;
        if bv.dim(1) != from_donor.len() {
            return Err(Error::shape("fuse mask", &[bv.dim(1)], &[from_donor.len()]));
        }
        let value = fuse_values(bv, dv, from_donor);
        let rg = self.rg(base) || self.rg(donor);
        Ok(self.push(
            value,
            Op::Fuse {
                base,
                donor,
                from_donor: from_donor.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ x ⊙ weights` as a scalar; a generic probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        weights.ensure_shape("weighted_sum weights", xv.shape())?;
        let s: f32 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Mean softmax cross-entropy of `z: (batch, classes)` against `labels`.
    pub fn softmax_xent(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_xent_forward(self.value(z), labels)?;
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                z,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU signs
    /// and max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward root", &[], self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param { .. } => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    let g = gy.data();
                    if self.rg(*x) {
                        let mut dx = vec![0.0f32; batch * din];
                        for r in 0..batch {
                            for o in 0..dout {
                                let go = g[r * dout + o];
                                let wr = &wv.data()[o * din..(o + 1) * din];
                                for (d, wv) in dx[r * din..(r + 1) * din].iter_mut().zip(wr) {
                                    *d += go * wv;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(vec![batch, din], dx)?);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0f32; dout * din];
                        for r in 0..batch {
                            let xr = &xv.data()[r * din..(r + 1) * din];
                            for o in 0..dout {
                                let go = g[r * dout + o];
                                for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                    *d += go * xv;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::new(vec![dout, din], dw)?);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let mut db = vec![0.0f32; dout];
                        for r in 0..batch {
                            for o in 0..dout {
                                db[o] += g[r * dout + o];
                            }
                        }
                        accumulate(&mut grads, b, Tensor::new(vec![dout], db)?);
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Conv2d { x, w, b, padding } => {
                    self.conv2d_backward(&mut grads, &gy, *x, *w, *b, *padding)?;
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![0.0f32; xv.numel()];
                    for (&src, &g) in argmax.iter().zip(gy.data()) {
                        dx[src] += g;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let hw = xv.dim(2) * xv.dim(3);
                    let scale = 1.0 / hw as f32;
                    let dx = gy
                        .data()
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, gy.reshape(&shape)?);
                }
                Op::Fuse {
                    base,
                    donor,
                    from_donor,
                } => {
                    let zeros = Tensor::zeros(gy.shape());
                    let inverted: Vec<bool> = from_donor.iter().map(|m| !m).collect();
                    if self.rg(*base) {
                        accumulate(&mut grads, *base, fuse_values(&gy, &zeros, from_donor));
                    }
                    if self.rg(*donor) {
                        accumulate(&mut grads, *donor, fuse_values(&gy, &zeros, &inverted));
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let g = gy.data()[0];
                    let data = weights.data().iter().map(|w| w * g).collect();
                    accumulate(&mut grads, *x, Tensor::new(weights.shape().to_vec(), data)?);
                }
                Op::SoftmaxXent { z, labels, probs } => {
                    let g = gy.data()[0];
                    let classes = probs.dim(1);
                    let scale = g / labels.len() as f32;
                    let mut dz = probs.data().to_vec();
                    for (r, &y) in labels.iter().enumerate() {
                        dz[r * classes + y] -= 1.0;
                    }
                    dz.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *z, Tensor::new(probs.shape().to_vec(), dz)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gy: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        let (oh, ow) = (gy.dim(2), gy.dim(3));
        let (xd, kd, g) = (xv.data(), wv.data(), gy.data());
        let want_x = self.rg(x);
        let want_w = self.rg(w);
        let mut dx = vec![0.0f32; if want_x { xv.numel() } else { 0 }];
        let mut dw = vec![0.0f32; if want_w { wv.numel() } else { 0 }];
        for n in 0..batch {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[((n * cout + co) * oh + oy) * ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < padding || iy - padding >= h {
                                    continue;
                                }
                                let iy = iy - padding;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < padding || ix - padding >= wd {
                                        continue;
                                    }
                                    let ix = ix - padding;
                                    let xi = ((n * cin + ci) * h + iy) * wd + ix;
                                    let wi = ((co * cin + ci) * k + ky) * k + kx;
                                    if want_x {
                                        dx[xi] += go * kd[wi];
                                    }
                                    if want_w {
                                        dw[wi] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        if want_w {
            accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
        }
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![0.0f32; cout];
            for n in 0..batch {
                for (co, d) in db.iter_mut().enumerate() {
                    let start = (n * cout + co) * oh * ow;
                    *d += g[start..start + oh * ow].iter().sum::<f32>();
                }
            }
            accumulate(grads, b, Tensor::new(vec![cout], db)?);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Copies channels of `base` and `donor` into a new map according to `from_donor`.
pub(crate) fn fuse_values(base: &Tensor, donor: &Tensor, from_donor: &[bool]) -> Tensor {
    let (batch, c) = (base.dim(0), base.dim(1));
    let plane: usize = base.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(base.numel());
    for n in 0..batch {
        for (ch, &take) in from_donor.iter().enumerate().take(c) {
            let start = (n * c + ch) * plane;
            let src = if take { donor } else { base };
            out.extend_from_slice(&src.data()[start..start + plane]);
        }
    }
    Tensor::new(base.shape().to_vec(), out).expect("fused shape equals base shape")
}

/// Stabilised mean cross-entropy. Returns the loss and the row-wise softmax.
pub fn softmax_xent_forward(z: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if z.rank() != 2 || z.dim(0) != labels.len() {
        return Err(Error::shape(
            "softmax_xent logits",
            &[labels.len(), 0],
            z.shape(),
        ));
    }
    let classes = z.dim(1);
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(
            "label",
            format!("{bad} is outside 0..{classes}"),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let mut probs = Vec::with_capacity(z.numel());
    let mut total = 0.0f32;
    for (r, &y) in labels.iter().enumerate() {
        let row = z.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        total += sum.ln() + max - row[y];
        probs.extend(exps.iter().map(|e| e / sum));
    }
    let loss = total / labels.len() as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_xent".into()));
    }
    Ok((loss, Tensor::new(z.shape().to_vec(), probs)?))
}

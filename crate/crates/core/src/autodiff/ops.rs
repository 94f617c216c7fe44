//! Forward definitions of every differentiable operation.

use std::rc::Rc;

use super::{Op, Tape, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ResizeAxis};
use crate::tensor::{numel, Scalar, Tensor};

/// Stride, zero padding and channel groups of a [`Var::conv2d`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

/// Border rule for [`Var::pad2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
    Reflect,
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every element of `out_shape` (row-major), the source offset obtained
/// by dotting its index with `src_strides`.
pub(crate) fn strided_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        self.check()?;
        other.check()?;
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Contract("operands recorded on different tapes".into()));
        }
        Ok(())
    }

    fn elementwise(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::shape(name, &a.shape, &b.shape));
        }
        let value = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        self.tape.push(name, shape, value, op, rg)
    }

    fn unary(self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.id];
        let value = a.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (a.shape.clone(), a.requires_grad);
        drop(nodes);
        self.tape.push(name, shape, value, op, rg)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary("scale", Op::Scale(self.id, c), move |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary("add_scalar", Op::AddScalar(self.id), move |x| x + c)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(T::zero()))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        self.unary("gelu", Op::Gelu(self.id), move |x| {
            half * x * (T::one() + (x * inv_sqrt2).erf())
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), kernels::sigmoid)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.id];
        let total: f64 = a.value.iter().map(|v| v.as_f64()).sum();
        let rg = a.requires_grad;
        drop(nodes);
        self.tape
            .push("sum", vec![], vec![T::of(total)], Op::Sum(self.id), rg)
    }

    /// Mean of all elements as a scalar.
    pub fn mean(self) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let a = &nodes[self.id];
        let total: f64 = a.value.iter().map(|v| v.as_f64()).sum();
        let mean = total / a.value.len() as f64;
        let rg = a.requires_grad;
        drop(nodes);
        self.tape
            .push("mean", vec![], vec![T::of(mean)], Op::Mean(self.id), rg)
    }

    /// Batched matrix product `[..., M, K] x [..., K, N]`. The right operand
    /// may also be a plain `[K, N]` matrix shared across the batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (ra, rb) = (a.shape.len(), b.shape.len());
        let err = || Error::shape("matmul", &a.shape, &b.shape);
        if ra < 2 || rb < 2 {
            return Err(err());
        }
        let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (kb, n) = (b.shape[rb - 2], b.shape[rb - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &a.shape[..ra - 2];
        let b_shared = rb == 2;
        if !b_shared && lead != &b.shape[..rb - 2] {
            return Err(err());
        }
        let batch = numel(lead);
        let mut value = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bo = if b_shared { 0 } else { i * k * n };
            kernels::matmul_acc(
                &a.value[i * m * k..(i + 1) * m * k],
                &b.value[bo..bo + k * n],
                &mut value[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
            b_shared,
        };
        self.tape.push("matmul", shape, value, op, rg)
    }

    /// Adds a `[N]` bias along the last axis.
    pub fn bias_add(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias)?;
        let nodes = self.tape.nodes();
        let (x, b) = (&nodes[self.id], &nodes[bias.id]);
        let n = *x.shape.last().unwrap_or(&1);
        if b.shape != [n] || x.shape.is_empty() {
            return Err(Error::shape("bias_add", &x.shape, &b.shape));
        }
        let value = x
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(&b.value).map(|(&v, &c)| v + c))
            .collect();
        let shape = x.shape.clone();
        let rg = x.requires_grad || b.requires_grad;
        drop(nodes);
        let op = Op::BiasAdd {
            x: self.id,
            bias: bias.id,
        };
        self.tape.push("bias_add", shape, value, op, rg)
    }

    /// Broadcasts singleton axes up to `shape` (same rank required).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let ok = x.shape.len() == shape.len()
            && x.shape.iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok || shape.contains(&0) {
            return Err(Error::shape("expand", &x.shape, shape));
        }
        let src = expand_strides(&x.shape);
        let value = strided_offsets(shape, &src)
            .into_iter()
            .map(|o| x.value[o])
            .collect();
        let rg = x.requires_grad;
        drop(nodes);
        self.tape
            .push("expand", shape.to_vec(), value, Op::Expand(self.id), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        if numel(shape) != x.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &x.shape, shape));
        }
        let (value, rg) = (x.value.clone(), x.requires_grad);
        drop(nodes);
        self.tape
            .push("reshape", shape.to_vec(), value, Op::Reshape(self.id), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let mut seen = vec![false; x.shape.len()];
        let valid = perm.len() == x.shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &x.shape, perm));
        }
        let in_strides = strides(&x.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let value = strided_offsets(&shape, &src)
            .into_iter()
            .map(|o| x.value[o])
            .collect();
        let rg = x.requires_grad;
        drop(nodes);
        let op = Op::Permute {
            x: self.id,
            perm: perm.to_vec(),
        };
        self.tape.push("permute", shape, value, op, rg)
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::shape("transpose", &self.shape(), &[a, b]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        if axis >= x.shape.len() || len == 0 || start + len > x.shape[axis] {
            return Err(Error::shape("slice", &x.shape, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&x.shape, axis);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&x.value[base..base + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        let rg = x.requires_grad;
        drop(nodes);
        let op = Op::Slice {
            x: self.id,
            axis,
            start,
        };
        self.tape.push("slice", shape, value, op, rg)
    }

    /// Generic indexed copy: output element `i` is `x[index[i]]`, or zero
    /// where `index[i] == GATHER_ZERO`.
    pub fn gather(self, out_shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        if index.len() != numel(out_shape) || out_shape.contains(&0) {
            return Err(Error::shape("gather", &x.shape, out_shape));
        }
        let len = x.value.len();
        let mut value = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                value.push(T::zero());
            } else if i < len {
                value.push(x.value[i]);
            } else {
                return Err(Error::Contract(format!(
                    "gather index {i} out of range for {len} elements"
                )));
            }
        }
        let rg = x.requires_grad;
        drop(nodes);
        self.tape.push(
            "gather",
            out_shape.to_vec(),
            value,
            Op::Gather { x: self.id, index },
            rg,
        )
    }

    /// Pads the last two axes by `(top, bottom, left, right)`.
    pub fn pad2d(self, amounts: (usize, usize, usize, usize), mode: PadMode) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape("pad2d", &shape, &[]));
        }
        let (top, bottom, left, right) = amounts;
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if mode == PadMode::Reflect && (top >= h || bottom >= h || left >= w || right >= w) {
            return Err(Error::Geometry(format!(
                "reflect padding {amounts:?} needs amounts smaller than {h}x{w}"
            )));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let planes = numel(&shape[..shape.len() - 2]);
        let map = |i: usize, before: usize, n: usize| -> Option<usize> {
            let s = i as isize - before as isize;
            if (0..n as isize).contains(&s) {
                return Some(s as usize);
            }
            match mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(s.clamp(0, n as isize - 1) as usize),
                PadMode::Reflect => Some(if s < 0 {
                    (-s) as usize
                } else {
                    2 * (n - 1) - s as usize
                }),
            }
        };
        let rows: Vec<Option<usize>> = (0..oh).map(|y| map(y, top, h)).collect();
        let cols: Vec<Option<usize>> = (0..ow).map(|x| map(x, left, w)).collect();
        let mut index = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for r in &rows {
                for c in &cols {
                    index.push(match (r, c) {
                        (Some(r), Some(c)) => p * h * w + r * w + c,
                        _ => GATHER_ZERO,
                    });
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([oh, ow]);
        self.gather(&out_shape, Rc::new(index))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with weights
    /// `[O, C / groups, k, k]`, lowered to im2col + matmul.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, opts: Conv2dOpts) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        let nodes = self.tape.nodes();
        let (x, w) = (&nodes[self.id], &nodes[weight.id]);
        let shape_err = || Error::shape("conv2d", &x.shape, &w.shape);
        if x.shape.len() != 4 || w.shape.len() != 4 || w.shape[2] != w.shape[3] {
            return Err(shape_err());
        }
        let (batch, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o, k) = (w.shape[0], w.shape[2]);
        let g = opts.groups;
        if g == 0 || opts.stride == 0 || c % g != 0 || o % g != 0 || w.shape[1] != c / g {
            return Err(shape_err());
        }
        let span_h = h + 2 * opts.pad;
        let span_w = wd + 2 * opts.pad;
        if span_h < k || span_w < k || (span_h - k) % opts.stride != 0 || (span_w - k) % opts.stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size not integral: input {h}x{wd}, kernel {k}, pad {}, stride {}",
                opts.pad, opts.stride
            )));
        }
        let geom = ConvGeom {
            batch,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
            kernel: k,
            stride: opts.stride,
            pad: opts.pad,
            groups: g,
            out_height: (span_h - k) / opts.stride + 1,
            out_width: (span_w - k) / opts.stride + 1,
        };
        let bias_node = bias.map(|b| &nodes[b.id]);
        if let Some(b) = bias_node {
            if b.shape != [o] {
                return Err(Error::shape("conv2d bias", &b.shape, &[o]));
            }
        }
        let value = conv_forward(&x.value, &w.value, bias_node.map(|b| b.value.as_slice()), &geom);
        let rg = x.requires_grad || w.requires_grad || bias_node.is_some_and(|b| b.requires_grad);
        let shape = vec![batch, o, geom.out_height, geom.out_width];
        drop(nodes);
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            bias: bias.map(|b| b.id),
            geom,
        };
        self.tape.push("conv2d", shape, value, op, rg)
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let nodes = self.tape.nodes();
        let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        let d = *x.shape.last().unwrap_or(&0);
        if x.shape.is_empty() || g.shape != [d] || b.shape != [d] {
            return Err(Error::shape("layer_norm", &x.shape, &g.shape));
        }
        let eps = T::of(eps);
        let mut value = Vec::with_capacity(x.value.len());
        for row in x.value.chunks(d) {
            let (mean, rstd) = row_stats(row, eps);
            for ((&v, &gv), &bv) in row.iter().zip(&g.value).zip(&b.value) {
                value.push((v - mean) * rstd * gv + bv);
            }
        }
        let shape = x.shape.clone();
        let rg = x.requires_grad || g.requires_grad || b.requires_grad;
        drop(nodes);
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            eps,
        };
        self.tape.push("layer_norm", shape, value, op, rg)
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        if axis >= x.shape.len() {
            return Err(Error::shape("softmax", &x.shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&x.shape, axis);
        let mut value = vec![T::zero(); x.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x.value[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (x.value[at(j)] - max).exp();
                    value[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    value[at(j)] = value[at(j)] / total;
                }
            }
        }
        let (shape, rg) = (x.shape.clone(), x.requires_grad);
        drop(nodes);
        self.tape
            .push("softmax", shape, value, Op::Softmax { x: self.id, axis }, rg)
    }

    /// Bilinear resize of the last two axes (half-pixel centres,
    /// `align_corners = false`).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let x = &nodes[self.id];
        let r = x.shape.len();
        if r < 2 || out_h == 0 || out_w == 0 || x.shape[r - 2] == 0 || x.shape[r - 1] == 0 {
            return Err(Error::shape("resize_bilinear", &x.shape, &[out_h, out_w]));
        }
        let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
        let planes = numel(&x.shape[..r - 2]);
        let ys = Rc::new(ResizeAxis::new(h, out_h));
        let xs = Rc::new(ResizeAxis::new(w, out_w));
        let value = kernels::resize_planes(&x.value, planes, (h, w), &ys, &xs);
        let mut shape = x.shape[..r - 2].to_vec();
        shape.extend([out_h, out_w]);
        let rg = x.requires_grad;
        drop(nodes);
        let op = Op::Resize { x: self.id, ys, xs };
        self.tape.push("resize_bilinear", shape, value, op, rg)
    }

    /// Mean binary cross-entropy between `self` (logits) and a {0,1} target,
    /// in the stable `max(z,0) - z t + ln(1 + e^-|z|)` form.
    pub fn bce_with_logits(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        self.check()?;
        let nodes = self.tape.nodes();
        let z = &nodes[self.id];
        if z.shape != target.shape() {
            return Err(Error::shape("bce_with_logits", &z.shape, target.shape()));
        }
        if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::Data("BCE target contains values outside {0, 1}".into()));
        }
        let total: f64 = z
            .value
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.as_f64(), t.as_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let value = vec![T::of(total / z.value.len() as f64)];
        let rg = z.requires_grad;
        drop(nodes);
        let op = Op::BceWithLogits {
            logits: self.id,
            target: Rc::new(target.data().to_vec()),
        };
        self.tape.push("bce_with_logits", vec![], value, op, rg)
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'t, T: Scalar>(vars: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = vars
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    for v in vars {
        first.same_tape(v)?;
    }
    let tape: &Tape<T> = first.tape;
    let nodes = tape.nodes();
    let base = &nodes[first.id].shape;
    if axis >= base.len() {
        return Err(Error::shape("concat", base, &[axis]));
    }
    let mut total = 0;
    for v in vars {
        let s = &nodes[v.id].shape;
        let agree = s.len() == base.len()
            && s.iter()
                .zip(base)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !agree {
            return Err(Error::shape("concat", base, s));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(base, axis);
    let mut value = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in vars {
            let n = &nodes[v.id];
            let chunk = n.shape[axis] * inner;
            value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let rg = vars.iter().any(|v| nodes[v.id].requires_grad);
    drop(nodes);
    let op = Op::Concat {
        inputs: vars.iter().map(|v| v.id).collect(),
        axis,
    };
    tape.push("concat", shape, value, op, rg)
}

/// Strides for reading a tensor through broadcast: size-1 axes get stride 0.
pub(crate) fn expand_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect()
}

pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (rows, npix) = (g.col_rows(), g.out_pixels());
    let opg = g.out_per_group();
    let in_img = g.in_channels * g.height * g.width;
    let out_img = g.out_channels * npix;
    let mut out = vec![T::zero(); g.batch * out_img];
    let mut cols = vec![T::zero(); rows * npix];
    for b in 0..g.batch {
        let image = &x[b * in_img..(b + 1) * in_img];
        let dst = &mut out[b * out_img..(b + 1) * out_img];
        for grp in 0..g.groups {
            kernels::im2col(image, g, grp * g.in_per_group(), &mut cols);
            kernels::matmul_acc(
                &w[grp * opg * rows..(grp + 1) * opg * rows],
                &cols,
                &mut dst[grp * opg * npix..(grp + 1) * opg * npix],
                opg,
                rows,
                npix,
            );
        }
        if let Some(bias) = bias {
            for (plane, &bv) in dst.chunks_mut(npix).zip(bias) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

//! Vector-Jacobian products for every [`Op`].

use super::ops::{expand_strides, row_stats, split_axis, strided_offsets, strides};
use super::{Node, Op, GATHER_ZERO};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Scalar;

type Grads<T> = Vec<Option<Vec<T>>>;

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut Grads<T>, id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Pushes `g` (the gradient of node `id`'s output) into its inputs.
pub(super) fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut Grads<T>) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
            }
            if wants(*b) {
                let gb = g
                    .iter()
                    .zip(av)
                    .zip(bv)
                    .map(|((&g, &a), &b)| -g * a / (b * b))
                    .collect();
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.iter().map(|&v| v * *c).collect()),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            let gx = g
                .iter()
                .zip(xv)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Gelu(x) => {
            let half = T::of(0.5);
            let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let gx = g
                .iter()
                .zip(&nodes[*x].value)
                .map(|(&g, &x)| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = (-half * x * x).exp() * inv_sqrt_2pi;
                    g * (cdf + x * pdf)
                })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sigmoid(x) => {
            let gx = g
                .iter()
                .zip(&node.value)
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; nodes[*x].value.len()]),
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            accumulate(nodes, grads, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_shared,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..*batch {
                    let bo = if *b_shared { 0 } else { i * k * n };
                    kernels::matmul_a_bt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &bv[bo..bo + k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let mut gb = vec![T::zero(); bv.len()];
                for i in 0..*batch {
                    let bo = if *b_shared { 0 } else { i * k * n };
                    kernels::matmul_at_b_acc(
                        &av[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::BiasAdd { x, bias } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if wants(*bias) {
                let n = nodes[*bias].value.len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                accumulate(nodes, grads, *bias, gb);
            }
        }
        Op::Expand(x) => {
            let xs = &nodes[*x].shape;
            let mut gx = vec![T::zero(); nodes[*x].value.len()];
            for (i, o) in strided_offsets(&node.shape, &expand_strides(xs)).into_iter().enumerate() {
                gx[o] += g[i];
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Permute { x, perm } => {
            let in_strides = strides(&nodes[*x].shape);
            let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut gx = vec![T::zero(); g.len()];
            for (i, o) in strided_offsets(&node.shape, &src).into_iter().enumerate() {
                gx[o] = g[i];
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &input in inputs {
                let len = nodes[input].shape[*axis];
                if wants(input) {
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, input, gi);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = split_axis(&nodes[*x].shape, *axis);
            let len = node.shape[*axis];
            let mut gx = vec![T::zero(); nodes[*x].value.len()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Gather { x, index } => {
            let mut gx = vec![T::zero(); nodes[*x].value.len()];
            for (&i, &gv) in index.iter().zip(g) {
                if i != GATHER_ZERO {
                    gx[i] += gv;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Conv2d { x, w, bias, geom } => {
            conv_backward(nodes, grads, g, *x, *w, *bias, geom);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = nodes[*gamma].value.len();
            let (xv, gv) = (&nodes[*x].value, &nodes[*gamma].value);
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let n = T::of(d as f64);
            for (r, row) in xv.chunks(d).enumerate() {
                let (mean, rstd) = row_stats(row, *eps);
                let grow = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv[j];
                    ggamma[j] += grow[j] * xhat;
                    gbeta[j] += grow[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv[j];
                    gx[r * d + j] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, ggamma);
            accumulate(nodes, grads, *beta, gbeta);
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(&node.shape, *axis);
            let y = &node.value;
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot = (0..n).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                    for j in 0..n {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Resize { x, ys, xs } => {
            let s = &nodes[*x].shape;
            let r = s.len();
            let planes = crate::tensor::numel(&s[..r - 2]);
            let gx = kernels::resize_planes_backward(g, planes, (s[r - 2], s[r - 1]), ys, xs);
            accumulate(nodes, grads, *x, gx);
        }
        Op::BceWithLogits { logits, target } => {
            let zv = &nodes[*logits].value;
            let scale = g[0] / T::of(zv.len() as f64);
            let gz = zv
                .iter()
                .zip(target.iter())
                .map(|(&z, &t)| (kernels::sigmoid(z) - t) * scale)
                .collect();
            accumulate(nodes, grads, *logits, gz);
        }
    }
}

fn conv_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut Grads<T>,
    g: &[T],
    x: usize,
    w: usize,
    bias: Option<usize>,
    geom: &ConvGeom,
) {
    let (rows, npix) = (geom.col_rows(), geom.out_pixels());
    let opg = geom.out_per_group();
    let in_img = geom.in_channels * geom.height * geom.width;
    let out_img = geom.out_channels * npix;
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let (want_x, want_w) = (nodes[x].requires_grad, nodes[w].requires_grad);

    let mut gx = vec![T::zero(); if want_x { xv.len() } else { 0 }];
    let mut gw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
    let mut cols = vec![T::zero(); rows * npix];
    let mut dcols = vec![T::zero(); rows * npix];
    for b in 0..geom.batch {
        let image = &xv[b * in_img..(b + 1) * in_img];
        let gout = &g[b * out_img..(b + 1) * out_img];
        for grp in 0..geom.groups {
            let c0 = grp * geom.in_per_group();
            let gout_g = &gout[grp * opg * npix..(grp + 1) * opg * npix];
            let w_g = &wv[grp * opg * rows..(grp + 1) * opg * rows];
            if want_w {
                kernels::im2col(image, geom, c0, &mut cols);
                kernels::matmul_a_bt_acc(
                    gout_g,
                    &cols,
                    &mut gw[grp * opg * rows..(grp + 1) * opg * rows],
                    opg,
                    npix,
                    rows,
                );
            }
            if want_x {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                kernels::matmul_at_b_acc(w_g, gout_g, &mut dcols, opg, rows, npix);
                kernels::col2im_acc(&dcols, geom, c0, &mut gx[b * in_img..(b + 1) * in_img]);
            }
        }
    }
    if want_x {
        accumulate(nodes, grads, x, gx);
    }
    if want_w {
        accumulate(nodes, grads, w, gw);
    }
    if let Some(bias) = bias {
        if nodes[bias].requires_grad {
            let mut gb = vec![T::zero(); geom.out_channels];
            for b in 0..geom.batch {
                for (c, plane) in g[b * out_img..(b + 1) * out_img].chunks(npix).enumerate() {
                    gb[c] += plane.iter().copied().sum::<T>();
                }
            }
            accumulate(nodes, grads, bias, gb);
        }
    }
}

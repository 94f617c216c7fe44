//! Raw slice kernels shared by the forward and backward passes.
//!
//! Nothing here knows about the tape. All loops are sequential so results are
//! bit-reproducible for fixed inputs.

use crate::tensor::Scalar;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Geometry of a 2-D cross-correlation with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the im2col matrix for one group.
    pub fn col_rows(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds the channels `[c0, c0 + in_per_group)` of one image into
/// `cols[col_rows, out_pixels]`. Out-of-bounds taps read zero.
pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, c0: usize, cols: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let npix = g.out_pixels();
    for c in 0..g.in_per_group() {
        let plane = &image[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.out_width + ox] =
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into the image gradient.
pub fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, c0: usize, image: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let npix = g.out_pixels();
    for c in 0..g.in_per_group() {
        let plane = &mut image[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One axis of a bilinear resize: each output index reads `lo` and `hi`
/// with weights `1 - frac` and `frac`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    /// Half-pixel centres (`align_corners = false`), source clamped to the
    /// valid range.
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut axis = ResizeAxis {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            axis.lo.push(lo);
            axis.hi.push(hi);
            axis.frac.push(frac);
        }
        axis
    }
}

/// Bilinear resize of `planes` independent `[ih, iw]` planes.
pub fn resize_planes<T: Scalar>(
    input: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    ys: &ResizeAxis,
    xs: &ResizeAxis,
) -> Vec<T> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut out = vec![T::zero(); planes * oh * ow];
    let xw: Vec<(T, T)> = xs
        .frac
        .iter()
        .map(|&f| (T::of(1.0 - f), T::of(f)))
        .collect();
    for p in 0..planes {
        let src = &input[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let fy = T::of(ys.frac[oy]);
            let gy = T::of(1.0 - ys.frac[oy]);
            let r0 = &src[ys.lo[oy] * iw..(ys.lo[oy] + 1) * iw];
            let r1 = &src[ys.hi[oy] * iw..(ys.hi[oy] + 1) * iw];
            for ox in 0..ow {
                let (wx0, wx1) = xw[ox];
                let (x0, x1) = (xs.lo[ox], xs.hi[ox]);
                let top = r0[x0] * wx0 + r0[x1] * wx1;
                let bottom = r1[x0] * wx0 + r1[x1] * wx1;
                dst[oy * ow + ox] = top * gy + bottom * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`].
pub fn resize_planes_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    ys: &ResizeAxis,
    xs: &ResizeAxis,
) -> Vec<T> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut out = vec![T::zero(); planes * ih * iw];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
        for oy in 0..oh {
            let fy = T::of(ys.frac[oy]);
            let gy = T::of(1.0 - ys.frac[oy]);
            for ox in 0..ow {
                let fx = T::of(xs.frac[ox]);
                let gx = T::of(1.0 - xs.frac[ox]);
                let v = g[oy * ow + ox];
                let (y0, y1, x0, x1) = (ys.lo[oy], ys.hi[oy], xs.lo[ox], xs.hi[ox]);
                dst[y0 * iw + x0] += v * gy * gx;
                dst[y0 * iw + x1] += v * gy * fx;
                dst[y1 * iw + x0] += v * fy * gx;
                dst[y1 * iw + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_axis_identity_and_doubling() {
        let id = ResizeAxis::new(5, 5);
        assert_eq!(id.lo, vec![0, 1, 2, 3, 4]);
        assert!(id.frac.iter().all(|&f| f == 0.0));

        // 2 -> 4 with half-pixel centres: sources -0.25, 0.25, 0.75, 1.25.
        let up = ResizeAxis::new(2, 4);
        assert_eq!(up.lo, vec![0, 0, 0, 1]);
        assert_eq!(up.hi, vec![1, 1, 1, 1]);
        assert_eq!(up.frac, vec![0.0, 0.25, 0.75, 0.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);

        // a^T * c via at_b equals explicit transpose product.
        let mut atb = [0.0; 6];
        matmul_at_b_acc(&a, &c, &mut atb, 2, 3, 2);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut expect = [0.0; 6];
        matmul_acc(&at, &c, &mut expect, 3, 2, 2);
        assert_eq!(atb, expect);

        let mut abt = [0.0; 4];
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0]; // b^T as 2x3
        matmul_a_bt_acc(&a, &bt, &mut abt, 2, 3, 2);
        assert_eq!(abt, c);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}

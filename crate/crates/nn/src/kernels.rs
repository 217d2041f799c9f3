//! Forward and backward numeric kernels on plain tensors.
//!
//! These are the building blocks the tape records. Every reduction runs in a
//! fixed order so repeated calls are bit-identical.

use crate::error::{NnError, Result};
use crate::tensor::{Shape, Tensor4};

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C, arbitrary strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover every strided access:
    // a spans m*k, b spans k*n and c spans m*n row-major elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(NnError::InvalidArgument("conv2d", "stride must be >= 1".into()));
        }
        if input.c != weight.c {
            return Err(NnError::Dimension {
                op: "conv2d",
                axis: "input channels",
                left: input.c,
                right: weight.c,
            });
        }
        let (ph, pw) = (input.h + 2 * pad, input.w + 2 * pad);
        if ph < weight.h || pw < weight.w {
            return Err(NnError::TooSmall {
                op: "conv2d",
                h: input.h,
                w: input.w,
                min: weight.h.max(weight.w).saturating_sub(2 * pad),
            });
        }
        Ok(Self {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_c: weight.n,
            k_h: weight.h,
            k_w: weight.w,
            stride,
            pad,
            out_h: (ph - weight.h) / stride + 1,
            out_w: (pw - weight.w) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    /// Columns of the unfolded patch matrix.
    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeometry, x: &[f32], cols: &mut [f32]) {
    let l = g.out_len();
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= ih {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= iw { 0.0 } else { src[xx as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f32], dx: &mut [f32]) {
    let l = g.out_len();
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= ih {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                        if xx >= 0 && xx < iw {
                            dst[xx as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is (out_c, in_c, k_h, k_w); `bias` has
/// `out_c` elements in any shape.
pub fn conv2d(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.out_c {
            return Err(NnError::Dimension {
                op: "conv2d",
                axis: "bias length",
                left: g.out_c,
                right: b.numel(),
            });
        }
    }
    let n = input.shape().n;
    let (k, l) = (g.patch_len(), g.out_len());
    let mut out = Tensor4::zeros([n, g.out_c, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * l] };
    for s in 0..n {
        let x = input.sample_data(s);
        let y = &mut out.data_mut()[s * g.out_c * l..(s + 1) * g.out_c * l];
        if let Some(b) = bias {
            for (co, row) in y.chunks_exact_mut(l).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        let patches: &[f32] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.out_c, k, l, weight.data(), (k as isize, 1), patches, (l as isize, 1), beta, y);
    }
    Ok(out)
}

/// Gradients of [`conv2d`]. Each requested gradient is returned in the shape
/// of its operand; the bias gradient has shape (1, out_c, 1, 1).
#[allow(clippy::type_complexity)]
pub fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<(Option<Tensor4>, Option<Tensor4>, Option<Tensor4>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let n = input.shape().n;
    let (k, l) = (g.patch_len(), g.out_len());
    let expect = Shape::new(n, g.out_c, g.out_h, g.out_w);
    if grad_out.shape() != expect {
        return Err(NnError::ShapeMismatch {
            op: "conv2d_backward",
            expected: expect,
            got: grad_out.shape(),
        });
    }
    let [want_x, want_w, want_b] = want;
    let mut dx = want_x.then(|| Tensor4::zeros(input.shape()));
    let mut dw = want_w.then(|| Tensor4::zeros(weight.shape()));
    let mut db = want_b.then(|| Tensor4::zeros([1, g.out_c, 1, 1]));
    let mut cols = vec![0.0; if want_w && !g.is_pointwise() { k * l } else { 0 }];
    let mut dcols = vec![0.0; if want_x { k * l } else { 0 }];
    for s in 0..n {
        let dy = &grad_out.data()[s * g.out_c * l..(s + 1) * g.out_c * l];
        if let Some(db) = db.as_mut() {
            for (co, row) in dy.chunks_exact(l).enumerate() {
                db.data_mut()[co] += row.iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let x = input.sample_data(s);
            let patches: &[f32] = if g.is_pointwise() {
                x
            } else {
                im2col(&g, x, &mut cols);
                &cols
            };
            // dW (co x k) += dY (co x l) * P^T (l x k)
            gemm(g.out_c, l, k, dy, (l as isize, 1), patches, (1, l as isize), 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            // dP (k x l) = W^T (k x co) * dY (co x l)
            gemm(k, g.out_c, l, weight.data(), (1, k as isize), dy, (l as isize, 1), 0.0, &mut dcols);
            let sample = g.in_c * g.in_h * g.in_w;
            let dst = &mut dx.data_mut()[s * sample..(s + 1) * sample];
            if g.is_pointwise() {
                for (d, v) in dst.iter_mut().zip(&dcols) {
                    *d += v;
                }
            } else {
                col2im_add(&g, &dcols, dst);
            }
        }
    }
    Ok((dx, dw, db))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let (ow, oh) = (s.w * 2, s.h * 2);
    let mut out = Tensor4::zeros([s.n, s.c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..s.n * s.c {
        let plane = &src[p * s.h * s.w..(p + 1) * s.h * s.w];
        let oplane = &mut dst[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let row = &plane[(y / 2) * s.w..(y / 2 + 1) * s.w];
            for (x, v) in oplane[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = row[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: 2x2 sum pooling.
pub fn upsample2x_backward(grad_out: &Tensor4) -> Tensor4 {
    let s = grad_out.shape();
    let (h, w) = (s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros([s.n, s.c, h, w]);
    let src = grad_out.data();
    let dst = out.data_mut();
    for p in 0..s.n * s.c {
        let plane = &src[p * s.h * s.w..(p + 1) * s.h * s.w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * s.w + 2 * x;
                dst[p * h * w + y * w + x] =
                    plane[i] + plane[i + 1] + plane[i + s.w] + plane[i + s.w + 1];
            }
        }
    }
    out
}

/// Normalizes each contiguous group of `group_len` values to zero mean and
/// unit (population) variance. Returns the normalized data and `1/sqrt(var+eps)`
/// per group.
pub fn normalize_groups(input: &Tensor4, group_len: usize, eps: f32) -> (Tensor4, Vec<f32>) {
    let mut out = input.clone();
    let groups = input.numel() / group_len.max(1);
    let mut inv_std = Vec::with_capacity(groups);
    for chunk in out.data_mut().chunks_exact_mut(group_len) {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
        let var = chunk
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / group_len as f64;
        let r = 1.0 / (var + eps as f64).sqrt();
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) * r) as f32;
        }
        inv_std.push(r as f32);
    }
    (out, inv_std)
}

/// Backward of [`normalize_groups`] given the normalized values `xhat` and
/// the gradient with respect to them.
pub fn normalize_groups_backward(
    xhat: &Tensor4,
    grad_xhat: &Tensor4,
    inv_std: &[f32],
    group_len: usize,
) -> Tensor4 {
    let mut dx = Tensor4::zeros(xhat.shape());
    let iter = dx
        .data_mut()
        .chunks_exact_mut(group_len)
        .zip(xhat.data().chunks_exact(group_len))
        .zip(grad_xhat.data().chunks_exact(group_len))
        .zip(inv_std);
    for (((d, xh), g), &r) in iter {
        let m = group_len as f64;
        let mean_g = g.iter().map(|&v| v as f64).sum::<f64>() / m;
        let mean_gx = g
            .iter()
            .zip(xh)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>()
            / m;
        for ((di, &gi), &xi) in d.iter_mut().zip(g).zip(xh) {
            *di = (r as f64 * (gi as f64 - mean_g - xi as f64 * mean_gx)) as f32;
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns the output and, per output element,
/// the flat input index of the selected maximum.
pub fn max_pool2(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(NnError::InvalidArgument(
            "max_pool2",
            format!("spatial size {}x{} is not even", s.h, s.w),
        ));
    }
    let (h, w) = (s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros([s.n, s.c, h, w]);
    let mut arg = Vec::with_capacity(out.numel());
    let src = input.data();
    let mut o = 0;
    for p in 0..s.n * s.c {
        let base = p * s.h * s.w;
        for y in 0..h {
            for x in 0..w {
                let i0 = base + 2 * y * s.w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + s.w, i0 + s.w + 1] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.data_mut()[o] = src[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor4::ones([1, 1, 2, 2]);
        let w = Tensor4::ones([1, 1, 1, 1]);
        let b = Tensor4::zeros([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_output_shape() {
        let x = Tensor4::zeros([1, 3, 256, 256]);
        let w = Tensor4::zeros([32, 3, 7, 7]);
        let y = conv2d(&x, &w, None, 1, 3).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 256, 256));
        let w = Tensor4::zeros([8, 3, 4, 4]);
        let y = conv2d(&Tensor4::zeros([2, 3, 9, 9]), &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 8, 4, 4));
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let err = conv2d(&Tensor4::zeros([1, 2, 4, 4]), &Tensor4::zeros([1, 3, 3, 3]), None, 1, 1)
            .unwrap_err();
        match err {
            NnError::Dimension { axis, left, right, .. } => {
                assert_eq!(axis, "input channels");
                assert_eq!((left, right), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(conv2d(&Tensor4::zeros([1, 3, 4, 4]), &Tensor4::zeros([1, 3, 3, 3]), None, 0, 1).is_err());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor4::from_fn([2, 2, 5, 6], |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f32 - 5.0);
        let w = Tensor4::from_fn([3, 2, 3, 3], |o, c, y, x| ((o * 5 + c * 3 + y * 2 + x) % 7) as f32 * 0.1 - 0.3);
        let b = Tensor4::from_vec([1, 3, 1, 1], vec![0.5, -1.0, 0.25]).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 2)] {
            let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let s = y.shape();
            for n in 0..s.n {
                for o in 0..s.c {
                    for oy in 0..s.h {
                        for ox in 0..s.w {
                            let mut acc = b.data()[o] as f64;
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                            acc += x.at(n, c, iy as usize, ix as usize) as f64
                                                * w.at(o, c, ky, kx) as f64;
                                        }
                                    }
                                }
                            }
                            assert!((y.at(n, o, oy, ox) as f64 - acc).abs() < 1e-4);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x);
        #[rustfmt::skip]
        let expect = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect[..]);
        assert_eq!(upsample2x(&Tensor4::zeros([2, 128, 64, 64])).shape(), Shape::new(2, 128, 128, 128));
        let back = upsample2x_backward(&Tensor4::ones([1, 1, 4, 4]));
        assert_eq!(back.data(), &[4.0; 4]);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor4::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -3.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 0.0]);
        assert_eq!(arg, vec![1, 2]);
        assert!(max_pool2(&Tensor4::zeros([1, 1, 3, 4])).is_err());
    }
}

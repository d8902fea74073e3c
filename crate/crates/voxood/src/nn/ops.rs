//! Low-level tensor math shared by the layers: im2col/col2im for 3D
//! convolution and the sinusoidal time embedding.

use super::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD};

/// Output extent of a convolution along one axis.
#[inline]
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold a `[C, H, W, D]` tensor into a `[C*k^3, H'*W'*D']` matrix of
/// receptive-field columns (cross-correlation layout, zero padding).
pub fn im2col<T: Scalar>(x: &ArrayD<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let shape = x.shape();
    let (c_in, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow, od) = (
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(w, k, stride, pad),
        conv_out_extent(d, k, stride, pad),
    );
    let p_out = oh * ow * od;
    let mut cols = Array2::<T>::zeros((c_in * k * k * k, p_out));
    let xs = x.as_slice().expect("input must be contiguous");
    let cs = cols.as_slice_mut().expect("cols contiguous");

    for c in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let row = ((c * k + kh) * k + kw) * k + kd;
                    let row_off = row * p_out;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for owi in 0..ow {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let src_row = ((c * h + ih as usize) * w + iw as usize) * d;
                            let dst_row = row_off + (ohi * ow + owi) * od;
                            if stride == 1 {
                                // Valid od range: 0 <= od + kd - pad < d.
                                let lo = pad.saturating_sub(kd);
                                let hi = (d + pad - kd).min(od);
                                if lo < hi {
                                    let src0 = src_row + lo + kd - pad;
                                    cs[dst_row + lo..dst_row + hi]
                                        .copy_from_slice(&xs[src0..src0 + (hi - lo)]);
                                }
                            } else {
                                for odi in 0..od {
                                    let id = (odi * stride + kd) as isize - pad as isize;
                                    if id >= 0 && id < d as isize {
                                        cs[dst_row + odi] = xs[src_row + id as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto the input
/// layout. Used for the gradient with respect to the convolution input.
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (c_in, h, w, d) = in_shape;
    let (oh, ow, od) = (
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(w, k, stride, pad),
        conv_out_extent(d, k, stride, pad),
    );
    let p_out = oh * ow * od;
    let mut x = ArrayD::<T>::zeros(ndarray::IxDyn(&[c_in, h, w, d]));
    let xs = x.as_slice_mut().expect("output contiguous");
    let cs = cols.as_slice().expect("cols contiguous");

    for c in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let row = ((c * k + kh) * k + kw) * k + kd;
                    let row_off = row * p_out;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for owi in 0..ow {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let dst_row = ((c * h + ih as usize) * w + iw as usize) * d;
                            let src_row = row_off + (ohi * ow + owi) * od;
                            for odi in 0..od {
                                let id = (odi * stride + kd) as isize - pad as isize;
                                if id >= 0 && id < d as isize {
                                    xs[dst_row + id as usize] =
                                        xs[dst_row + id as usize] + cs[src_row + odi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Direct stencil kernels for k=3, stride=1, pad=1 convolutions.
//
// At large spatial extents the im2col matrix dwarfs the GEMM it feeds, so
// stride-1 3x3x3 convolutions run as 9 fused row stencils per (c_out, c_in)
// pair instead. Same arithmetic, contiguous access, no packing.
// ---------------------------------------------------------------------------

#[inline]
fn stencil_row_add<T: Scalar>(y: &mut [T], x: &[T], w0: T, w1: T, w2: T) {
    let d = y.len();
    debug_assert_eq!(x.len(), d);
    if d == 1 {
        y[0] = y[0] + w1 * x[0];
        return;
    }
    y[0] = y[0] + w1 * x[0] + w2 * x[1];
    for i in 1..d - 1 {
        y[i] = y[i] + w0 * x[i - 1] + w1 * x[i] + w2 * x[i + 1];
    }
    y[d - 1] = y[d - 1] + w0 * x[d - 2] + w1 * x[d - 1];
}

#[inline]
fn stencil_row_dots<T: Scalar>(dy: &[T], x: &[T]) -> (T, T, T) {
    let d = dy.len();
    let mut d0 = T::zero();
    let mut d1 = T::zero();
    let mut d2 = T::zero();
    for i in 0..d {
        d1 = d1 + dy[i] * x[i];
    }
    for i in 1..d {
        d0 = d0 + dy[i] * x[i - 1];
        d2 = d2 + dy[i - 1] * x[i];
    }
    (d0, d1, d2)
}

#[inline]
fn kh_range(k_off: usize, extent: usize) -> (usize, usize) {
    let lo = if k_off == 0 { 1 } else { 0 };
    let hi = if k_off == 2 { extent - 1 } else { extent };
    (lo, hi)
}

/// Forward pass for k=3, stride=1, pad=1: `y[C_out,H,W,D]`.
pub fn conv3x3s1_forward<T: Scalar>(
    x: &ArrayD<T>,
    weight: &ArrayD<T>,
    bias: &ArrayD<T>,
) -> ArrayD<T> {
    let (c_in, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = weight.shape()[0];
    let plane = h * w * d;
    let mut y = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[c_out, h, w, d]));
    let xs = x.as_slice().unwrap();
    let ws = weight.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for co in 0..c_out {
        let b = bias[co];
        for v in &mut ys[co * plane..(co + 1) * plane] {
            *v = b;
        }
    }
    for co in 0..c_out {
        let y_base = co * plane;
        for ci in 0..c_in {
            let x_base = ci * plane;
            let w_base = (co * c_in + ci) * 27;
            for kh in 0..3 {
                let (oh_lo, oh_hi) = kh_range(kh, h);
                for kw in 0..3 {
                    let (ow_lo, ow_hi) = kh_range(kw, w);
                    let w0 = ws[w_base + (kh * 3 + kw) * 3];
                    let w1 = ws[w_base + (kh * 3 + kw) * 3 + 1];
                    let w2 = ws[w_base + (kh * 3 + kw) * 3 + 2];
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - 1;
                        let x_row0 = x_base + (ih * w + (ow_lo + kw - 1)) * d;
                        let y_row0 = y_base + (oh * w + ow_lo) * d;
                        for j in 0..(ow_hi - ow_lo) {
                            let xr = &xs[x_row0 + j * d..x_row0 + j * d + d];
                            let yr = &mut ys[y_row0 + j * d..y_row0 + j * d + d];
                            stencil_row_add(yr, xr, w0, w1, w2);
                        }
                    }
                }
            }
        }
    }
    y
}

/// Input gradient for k=3, stride=1, pad=1.
pub fn conv3x3s1_backward_dx<T: Scalar>(
    dy: &ArrayD<T>,
    weight: &ArrayD<T>,
    in_shape: (usize, usize, usize, usize),
) -> ArrayD<T> {
    let (c_in, h, w, d) = in_shape;
    let c_out = weight.shape()[0];
    let plane = h * w * d;
    let mut dx = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[c_in, h, w, d]));
    let dys = dy.as_slice().unwrap();
    let ws = weight.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for co in 0..c_out {
        let dy_base = co * plane;
        for ci in 0..c_in {
            let dx_base = ci * plane;
            let w_base = (co * c_in + ci) * 27;
            for kh in 0..3 {
                let (oh_lo, oh_hi) = kh_range(kh, h);
                for kw in 0..3 {
                    let (ow_lo, ow_hi) = kh_range(kw, w);
                    let w0 = ws[w_base + (kh * 3 + kw) * 3];
                    let w1 = ws[w_base + (kh * 3 + kw) * 3 + 1];
                    let w2 = ws[w_base + (kh * 3 + kw) * 3 + 2];
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - 1;
                        let dx_row0 = dx_base + (ih * w + (ow_lo + kw - 1)) * d;
                        let dy_row0 = dy_base + (oh * w + ow_lo) * d;
                        for j in 0..(ow_hi - ow_lo) {
                            let dyr = &dys[dy_row0 + j * d..dy_row0 + j * d + d];
                            let dxr = &mut dxs[dx_row0 + j * d..dx_row0 + j * d + d];
                            // Transposed stencil: taps reverse.
                            stencil_row_add(dxr, dyr, w2, w1, w0);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Weight and bias gradients for k=3, stride=1, pad=1; accumulates in place.
pub fn conv3x3s1_backward_dw<T: Scalar>(
    dy: &ArrayD<T>,
    x: &ArrayD<T>,
    dweight: &mut ArrayD<T>,
    dbias: &mut ArrayD<T>,
) {
    let (c_in, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = dy.shape()[0];
    let plane = h * w * d;
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let dws = dweight.as_slice_mut().unwrap();
    for co in 0..c_out {
        let dy_base = co * plane;
        let mut b = T::zero();
        for v in &dys[dy_base..dy_base + plane] {
            b = b + *v;
        }
        dbias[co] = dbias[co] + b;
        for ci in 0..c_in {
            let x_base = ci * plane;
            let w_base = (co * c_in + ci) * 27;
            for kh in 0..3 {
                let (oh_lo, oh_hi) = kh_range(kh, h);
                for kw in 0..3 {
                    let (ow_lo, ow_hi) = kh_range(kw, w);
                    let mut acc0 = T::zero();
                    let mut acc1 = T::zero();
                    let mut acc2 = T::zero();
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - 1;
                        let x_row0 = x_base + (ih * w + (ow_lo + kw - 1)) * d;
                        let dy_row0 = dy_base + (oh * w + ow_lo) * d;
                        for j in 0..(ow_hi - ow_lo) {
                            let xr = &xs[x_row0 + j * d..x_row0 + j * d + d];
                            let dyr = &dys[dy_row0 + j * d..dy_row0 + j * d + d];
                            let (d0, d1, d2) = stencil_row_dots(dyr, xr);
                            acc0 = acc0 + d0;
                            acc1 = acc1 + d1;
                            acc2 = acc2 + d2;
                        }
                    }
                    let idx = w_base + (kh * 3 + kw) * 3;
                    dws[idx] = dws[idx] + acc0;
                    dws[idx + 1] = dws[idx + 1] + acc1;
                    dws[idx + 2] = dws[idx + 2] + acc2;
                }
            }
        }
    }
}

/// Sinusoidal timestep embedding: first half sine, second half cosine, with
/// log-spaced frequencies spanning periods from 1 to 10000.
pub fn time_embedding<T: Scalar>(t: f64, dim: usize) -> Array1<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2, got {dim}");
    let half = dim / 2;
    let mut out = Array1::<T>::zeros(dim);
    for j in 0..half {
        let exponent = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10000f64).ln() * exponent).exp();
        out[j] = T::from_f64((t * freq).sin());
        out[half + j] = T::from_f64((t * freq).cos());
    }
    out
}

//! Forward kernels for the tensor operations.
//!
//! Convolution is cross-correlation with zero padding, computed per sample
//! via im2col and a small accumulating matrix multiply. Max pooling
//! replicate-pads on the right/bottom edge so any spatial size pools to
//! `ceil(dim / window)`.

use super::{ConvParams, Shape, Tensor};
use crate::error::{Error, Result};

/// Output size of a convolution along one axis, if non-empty.
pub(crate) fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let eff = dil * (k - 1) + 1;
    let padded = size + 2 * pad;
    if padded < eff {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

/// c[m x n] += a[m x k] * b[k x n]
pub(crate) fn gemm_ab(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m x n] += a[m x k] * transpose(b[n x k])
pub(crate) fn gemm_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// c[m x n] += transpose(a[k x m]) * b[k x n]
pub(crate) fn gemm_atb(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Unfolds one sample's patches into `col` with rows `in_c * kh * kw` and
/// columns `oh * ow`. Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let cols = oh * ow;
    for ic in 0..c {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ic * kh + ky) * kw + kx;
                let out_row = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-accumulates a column-matrix gradient back onto one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let cols = oh * ow;
    for ic in 0..c {
        let plane = &mut gx[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ic * kh + ky) * kw + kx;
                let src_row = &col[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom(x: Shape, w: Shape, stride: usize, pad: usize, dil: usize) -> Result<ConvGeom> {
    if x.c != w.c {
        return Err(Error::config(format!(
            "conv2d: input has {} channels but the kernel expects {}",
            x.c, w.c
        )));
    }
    let oh = conv_out_dim(x.h, w.h, stride, pad, dil);
    let ow = conv_out_dim(x.w, w.w, stride, pad, dil);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(ConvGeom { oh, ow }),
        _ => Err(Error::config(format!(
            "conv2d: {}x{} kernel (stride {stride}, padding {pad}, dilation {dil}) produces an empty output on a {}x{} input",
            w.h, w.w, x.h, x.w
        ))),
    }
}

pub(crate) fn conv_forward(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weights.shape();
    let geom = conv_geom(xs, ws, stride, pad, dil)?;
    let (oc, ic, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let (oh, ow) = (geom.oh, geom.ow);
    let cols = oh * ow;
    let krows = ic * kh * kw;
    let mut out = Tensor::zeros(Shape::new(xs.n, oc, oh, ow));
    let unit = kh == 1 && kw == 1 && stride == 1 && pad == 0 && dil == 1;
    let mut col = if unit { Vec::new() } else { vec![0.0; krows * cols] };
    for s in 0..xs.n {
        let xin = &x.data()[s * ic * xs.plane()..(s + 1) * ic * xs.plane()];
        let out_mat = &mut out.data_mut()[s * oc * cols..(s + 1) * oc * cols];
        if let Some(b) = bias {
            for (o, row) in out_mat.chunks_mut(cols).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        if unit {
            // 1x1 stride-1 convolutions read the input planes directly.
            gemm_ab(weights.data(), xin, out_mat, oc, krows, cols);
        } else {
            im2col(xin, ic, xs.h, xs.w, kh, kw, stride, pad, dil, oh, ow, &mut col);
            gemm_ab(weights.data(), &col, out_mat, oc, krows, cols);
        }
    }
    Ok(out)
}

/// Gradient buffers produced by the convolution backward pass.
pub(crate) struct ConvGrads {
    pub gx: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    x: &Tensor,
    weights: &Tensor,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dil: usize,
    out_shape: Shape,
    gout: &[f64],
) -> ConvGrads {
    let xs = x.shape();
    let ws = weights.shape();
    let (oc, ic, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let cols = oh * ow;
    let krows = ic * kh * kw;
    let mut gx = vec![0.0; xs.numel()];
    let mut gw = vec![0.0; ws.numel()];
    let mut gb = has_bias.then(|| vec![0.0; oc]);
    let unit = kh == 1 && kw == 1 && stride == 1 && pad == 0 && dil == 1;
    let mut col = if unit { Vec::new() } else { vec![0.0; krows * cols] };
    let mut gcol = vec![0.0; krows * cols];
    for s in 0..xs.n {
        let xin = &x.data()[s * ic * xs.plane()..(s + 1) * ic * xs.plane()];
        let go = &gout[s * oc * cols..(s + 1) * oc * cols];
        if let Some(gb) = gb.as_mut() {
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += go[o * cols..(o + 1) * cols].iter().sum::<f64>();
            }
        }
        if unit {
            gemm_abt(go, xin, &mut gw, oc, cols, krows);
            let gx_s = &mut gx[s * ic * xs.plane()..(s + 1) * ic * xs.plane()];
            gemm_atb(weights.data(), go, gx_s, krows, oc, cols);
        } else {
            im2col(xin, ic, xs.h, xs.w, kh, kw, stride, pad, dil, oh, ow, &mut col);
            gemm_abt(go, &col, &mut gw, oc, cols, krows);
            gcol.fill(0.0);
            gemm_atb(weights.data(), go, &mut gcol, krows, oc, cols);
            let gx_s = &mut gx[s * ic * xs.plane()..(s + 1) * ic * xs.plane()];
            col2im_acc(&gcol, ic, xs.h, xs.w, kh, kw, stride, pad, dil, oh, ow, gx_s);
        }
    }
    ConvGrads { gx, gw, gb }
}

/// Max pooling with right/bottom replicate padding up to the next window
/// multiple. Also returns, per output element, the linear index of the
/// source element that supplied the maximum (first in row-major window
/// order on ties), which is where the gradient routes.
pub(crate) fn maxpool_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 {
        return Err(Error::config("maxpool2d: window must be positive"));
    }
    let s = x.shape();
    let oh = s.h.div_ceil(window);
    let ow = s.w.div_ceil(window);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut argmax = vec![0usize; out.numel()];
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for py in oy * window..(oy + 1) * window {
                        let sy = py.min(s.h - 1);
                        for px in ox * window..(ox + 1) * window {
                            let sx = px.min(s.w - 1);
                            let idx = s.idx(n, c, sy, sx);
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.data_mut()[k] = best;
                    argmax[k] = best_idx;
                    k += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Nearest-neighbour resize to `(th, tw)`; output pixel `(y, x)` copies
/// source pixel `(y * h / th, x * w / tw)`. Target dims must not shrink.
pub(crate) fn upsample_to(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let s = x.shape();
    if th < s.h || tw < s.w {
        return Err(Error::config(format!(
            "upsample: target {}x{} is smaller than source {}x{}",
            th, tw, s.h, s.w
        )));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, th, tw));
    let src_x: Vec<usize> = (0..tw).map(|x| x * s.w / tw).collect();
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..th {
                let sy = oy * s.h / th;
                let src = &x.data()[s.idx(n, c, sy, 0)..s.idx(n, c, sy, 0) + s.w];
                for sx in &src_x {
                    out.data_mut()[k] = src[*sx];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Kind of elementwise binary operation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{what}: shapes {} and {} do not match",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// Public forward-only operations.

/// Cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    conv_forward(x, &p.weights, p.bias.as_ref(), p.stride, p.padding, p.dilation)
}

pub fn maxpool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    maxpool_forward(x, window).map(|(t, _)| t)
}

/// Nearest-neighbour upsampling by integer scale factors.
pub fn upsample_nearest(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if target_h < s.h || target_w < s.w || target_h % s.h != 0 || target_w % s.w != 0 {
        return Err(Error::config(format!(
            "upsample_nearest: target {}x{} is not an integer multiple of source {}x{}",
            target_h, target_w, s.h, s.w
        )));
    }
    upsample_to(x, target_h, target_w)
}

pub fn elementwise(a: &Tensor, b: &Tensor, kind: ElementwiseKind) -> Result<Tensor> {
    check_same_shape(a, b, "elementwise")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| match kind {
            ElementwiseKind::Add => x + y,
            ElementwiseKind::Sub => x - y,
            ElementwiseKind::Mul => x * y,
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, ElementwiseKind::Add)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, ElementwiseKind::Sub)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, ElementwiseKind::Mul)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

/// Concatenates along the channel axis; batch and spatial dims must agree.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::usage("concat_channels: empty input list"))?;
    let s0 = first.shape();
    let mut total_c = 0;
    for x in xs {
        let s = x.shape();
        if s.n != s0.n || s.h != s0.h || s.w != s0.w {
            return Err(Error::config(format!(
                "concat_channels: shape {} incompatible with {}",
                s, s0
            )));
        }
        total_c += s.c;
    }
    let out_shape = Shape::new(s0.n, total_c, s0.h, s0.w);
    let mut out = Tensor::zeros(out_shape);
    let plane = s0.plane();
    for n in 0..s0.n {
        let mut c_off = 0;
        for x in xs {
            let c = x.shape().c;
            let src = &x.data()[n * c * plane..(n + 1) * c * plane];
            let dst_start = out_shape.idx(n, c_off, 0, 0);
            out.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
            c_off += c;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let p = ConvParams::new(t((1, 1, 1, 1), vec![2.0]), None, 1, 0, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = t((1, 1, 3, 4), (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let mut k = Tensor::zeros(Shape::new(1, 1, 3, 3));
        k.set(0, 0, 1, 1, 1.0);
        let p = ConvParams::new(k, None, 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t((1, 2, 2, 2), vec![0.0; 8]);
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 3, 1, 1)), None, 1, 0, 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = t((1, 1, 2, 2), vec![0.0; 4]);
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 1, 5, 5)), None, 1, 0, 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn maxpool_takes_window_max() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_stays_constant() {
        for window in [2, 3, 4] {
            let x = Tensor::filled(Shape::new(1, 2, 5, 7), 3.25);
            let y = maxpool2d(&x, window).unwrap();
            assert_eq!(y.shape().h, 5usize.div_ceil(window));
            assert!(y.data().iter().all(|&v| v == 3.25));
        }
    }

    #[test]
    fn maxpool_rejects_zero_window() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(maxpool2d(&x, 0).is_err());
    }

    #[test]
    fn maxpool_argmax_prefers_first_on_ties() {
        let x = t((1, 1, 2, 2), vec![5.0, 5.0, 5.0, 5.0]);
        let (_, argmax) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn upsample_replicates_single_cell() {
        let x = t((1, 1, 1, 1), vec![4.0]);
        let y = upsample_nearest(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn upsample_identity_when_same_size() {
        let x = t((1, 1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = upsample_nearest(&x, 2, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upsample_rejects_non_integer_scale() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(upsample_nearest(&x, 3, 4).is_err());
        assert!(upsample_nearest(&x, 1, 2).is_err());
    }

    #[test]
    fn pool_then_upsample_recovers_constant() {
        let x = Tensor::filled(Shape::new(1, 1, 8, 8), -1.5);
        let pooled = maxpool2d(&x, 4).unwrap();
        let back = upsample_nearest(&pooled, 8, 8).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn self_subtraction_is_zero() {
        let a = t((1, 1, 2, 2), vec![1.0, -2.0, 3.5, 0.25]);
        let z = sub(&a, &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 2, 3));
        assert!(matches!(add(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn concat_adds_channel_counts() {
        let a = Tensor::zeros(Shape::new(2, 2, 3, 4));
        let b = Tensor::filled(Shape::new(2, 3, 3, 4), 1.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 3, 4));
        assert_eq!(y.get(0, 1, 0, 0), 0.0);
        assert_eq!(y.get(0, 2, 0, 0), 1.0);
        assert_eq!(y.get(1, 4, 2, 3), 1.0);
    }

    #[test]
    fn relu_split_reconstructs_abs() {
        let x = t((1, 1, 2, 3), vec![-2.0, 0.5, -0.25, 3.0, 0.0, -7.5]);
        let neg = t((1, 1, 2, 3), x.data().iter().map(|v| -v).collect());
        let lhs = add(&relu(&neg), &relu(&x)).unwrap();
        for (l, v) in lhs.data().iter().zip(x.data()) {
            assert_eq!(*l, v.abs());
        }
    }
}

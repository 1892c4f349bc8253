//! Raw forward/backward kernels. These work on plain tensors and know nothing
//! about the tape.

use super::{direct, Scalar, Tensor};
use crate::error::{Error, Result};

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected a 4-d tensor, got {s:?}"))),
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    padding: usize,
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    let [b, cin, h, wd] = dims4("conv2d", x)?;
    let [cout, wcin, kh, kw] = dims4("conv2d", w)?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = wd + 2 * padding - kw + 1;
    Ok(([b, cin, h, wd], [cout, cin, kh, kw], oh, ow))
}

/// Stride-1 cross-correlation with symmetric zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let ([b, cin, h, wd], [cout, _, k, _], oh, ow) = conv_geometry(x, w, padding)?;
    if let Some(bias) = bias {
        if bias.len() != cout {
            return Err(Error::shape("conv2d", format!("bias has {} values for {cout} outputs", bias.len())));
        }
    }
    let plane = oh * ow;
    let mut out = Tensor::zeros([b, cout, oh, ow]);
    if k == 1 && padding == 0 {
        for n in 0..b {
            let xn = &x.data()[n * cin * plane..(n + 1) * cin * plane];
            let yn = &mut out.data_mut()[n * cout * plane..(n + 1) * cout * plane];
            T::gemm(cout, cin, plane, w.data(), false, xn, false, yn, false);
        }
    } else {
        let g = direct::Geometry::new(b, h, wd, k, padding);
        direct::conv_forward(&g, x.data(), cin, w.data(), cout, out.data_mut());
    }
    if let Some(bias) = bias {
        for yn in out.data_mut().chunks_mut(cout * plane) {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut yn[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    padding: usize,
    need_dx: bool,
) -> Result<Conv2dGrads<T>> {
    let ([b, cin, h, wd], [cout, _, k, _], oh, ow) = conv_geometry(x, w, padding)?;
    if dy.shape() != [b, cout, oh, ow] {
        return Err(Error::shape("conv2d_backward", format!("dy shape {:?}", dy.shape())));
    }
    let plane = oh * ow;
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros([cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    for dyn_ in dy.data().chunks(cout * plane) {
        for (o, d) in db.data_mut().iter_mut().enumerate() {
            *d += dyn_[o * plane..(o + 1) * plane].iter().copied().sum();
        }
    }
    if k == 1 && padding == 0 {
        for n in 0..b {
            let xn = &x.data()[n * cin * plane..(n + 1) * cin * plane];
            let dyn_ = &dy.data()[n * cout * plane..(n + 1) * cout * plane];
            // dW[cout, cin] += dY[cout, plane] · Xᵀ[plane, cin]
            T::gemm(cout, plane, cin, dyn_, false, xn, true, dw.data_mut(), true);
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx.data_mut()[n * cin * plane..(n + 1) * cin * plane];
                T::gemm(cin, cout, plane, w.data(), true, dyn_, false, dxn, false);
            }
        }
    } else {
        let g = direct::Geometry::new(b, h, wd, k, padding);
        let dxd = dx.as_mut().map(|t| t.data_mut());
        direct::conv_backward(&g, x.data(), cin, w.data(), cout, dy.data(), dw.data_mut(), dxd);
    }
    Ok(Conv2dGrads { dx, dw, db })
}

/// 2×2 max pooling. Returns the pooled tensor and, for each output, the flat
/// input offset of the window maximum (first in row-major order on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = dims4("maxpool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("spatial extent {h}x{w} is not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut arg = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (bc * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

/// Source taps for one axis of ×2 bilinear upsampling with half-pixel
/// centres: `src = (dst + 0.5) / 2 - 0.5`, clamped at zero.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn bilinear_upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("bilinear_upsample2", x)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_upsample2", "empty spatial extent"));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let src = &xd[bc * h * w..(bc + 1) * h * w];
        let dst = &mut od[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_upsample2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let dd = dy.data();
    let xd = dx.data_mut();
    for bc in 0..b * c {
        let g = &dd[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut xd[bc * h * w..(bc + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

/// Per-channel batch moments (biased variance).
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// `[B, C, rest...]` viewed as `(B, C, S)`.
pub(crate) fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batchnorm", format!("need at least 2 axes, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub(crate) fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<BatchStats<T>> {
    let (b, c, s) = channel_view(x.shape())?;
    let n = T::from_f64((b * s) as f64);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            acc += xd[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().copied().sum();
        }
        let m = acc / n;
        let mut acc2 = T::zero();
        for bi in 0..b {
            for &v in &xd[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                acc2 += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = acc2 / n;
    }
    Ok(BatchStats { mean, var })
}

/// `y = gamma·(x - mean)·inv_std + beta`; also returns the normalized `x̂`.
pub(crate) fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, s) = channel_view(x.shape())?;
    if mean.len() != c || gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batchnorm", format!("{c} channels vs {} affine params", gamma.len())));
    }
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut xhat = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
            for i in r {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok((y, xhat))
}

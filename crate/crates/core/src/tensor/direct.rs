//! Direct stride-1 convolution on a padded, batch-flattened layout.
//!
//! Every channel becomes one flat row holding all images laid end to end.
//! Image rows have pitch `wp ≥ w + pad` and images are separated by `pad`
//! zero rows, so each zero gap serves as the right padding of one row and
//! the left padding of the next. A kernel tap `(ki, kj)` is then a constant
//! offset `ki·wp + kj`: output position `p` reads `row[p + offset]` for every
//! tap. Outputs live on the same pitched grid; the gap columns are computed
//! and discarded. This avoids materializing an im2col matrix, which for 9×9
//! kernels is 81 times the size of the input.

use super::Scalar;

/// Output channels per register block (AVX-512 has twice the registers).
const OB: usize = 4;
const OB_WIDE: usize = 8;
/// Positions per register block.
const LANES: usize = 16;

/// Output channels per weight-gradient tile.
const WO: usize = 4;
/// Taps per weight-gradient tile.
const WT: usize = 3;
/// Positions per weight-gradient step; the AVX-512 kernel steps by up to
/// `WL_WIDE`, which also sets the rounding of the `dy` rows.
const WL: usize = 8;
const WL_WIDE: usize = 16;
/// Positions per cache-resident chunk of the weight gradient.
const CHUNK: usize = 1024;

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Half-open position ranges, each processed from its start in whole
/// steps. Ranges whose rounded extents would overlap are merged, so no
/// position is visited twice.
#[derive(Debug, Clone)]
struct Ranges(Vec<(usize, usize)>);

impl Ranges {
    /// One range of `len` positions every `pitch`, starting at `first`.
    fn strided(first: usize, pitch: usize, len: usize, count: usize) -> Self {
        Ranges((0..count).map(|i| (first + i * pitch, first + i * pitch + len)).collect())
    }

    /// Sorted, merged ranges with ends rounded to whole `lanes` steps.
    fn rounded(&self, lanes: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::with_capacity(self.0.len());
        for &(s, e) in &self.0 {
            match out.last_mut() {
                Some(last) if s < last.1 => last.1 = last.0 + round_up(e - last.0, lanes),
                _ => out.push((s, s + round_up(e - s, lanes))),
            }
        }
        out
    }

    fn steps(&self, lanes: usize) -> impl Iterator<Item = usize> {
        self.rounded(lanes)
            .into_iter()
            .flat_map(move |(s, e)| (s..e).step_by(lanes))
    }

    /// One past the last position touched when stepping by `lanes`.
    fn reach_end(&self, lanes: usize) -> usize {
        self.rounded(lanes).last().map_or(0, |r| r.1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    /// Row pitch.
    wp: usize,
    /// Image pitch.
    img: usize,
    /// Offset of pixel (0, 0) of the first image in a padded row.
    front: usize,
}

impl Geometry {
    pub fn new(b: usize, h: usize, w: usize, k: usize, pad: usize) -> Self {
        let oh = h + 2 * pad + 1 - k;
        let ow = w + 2 * pad + 1 - k;
        let wp = (w + pad).max(ow);
        let rows = (h + pad).max(oh);
        Geometry {
            b,
            h,
            w,
            k,
            oh,
            ow,
            wp,
            img: rows * wp,
            front: pad * wp + pad,
        }
    }

    /// Largest tap offset.
    fn reach(&self) -> usize {
        (self.k - 1) * (self.wp + 1)
    }

    fn taps(&self) -> Vec<usize> {
        let k = self.k;
        (0..k * k).map(|t| (t / k) * self.wp + t % k).collect()
    }

    fn output_ranges(&self) -> Ranges {
        Ranges::strided(0, self.img, self.oh * self.wp, self.b)
    }

    fn input_ranges(&self) -> Ranges {
        Ranges::strided(self.front, self.img, self.h * self.wp, self.b)
    }

    /// `[B, C, H, W]` into zero-padded rows of length `stride`.
    fn pad_input<T: Scalar>(&self, x: &[T], c: usize, stride: usize) -> Vec<T> {
        let mut out = vec![T::zero(); c * stride];
        let (h, w) = (self.h, self.w);
        for bi in 0..self.b {
            for ch in 0..c {
                let src = &x[(bi * c + ch) * h * w..][..h * w];
                let row = &mut out[ch * stride + self.front + bi * self.img..];
                for y in 0..h {
                    row[y * self.wp..y * self.wp + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        out
    }

    /// `[B, C, oh, ow]` onto the output grid, shifted by `shift`, in rows of
    /// length `stride`; zero elsewhere.
    fn grid_output<T: Scalar>(&self, y: &[T], c: usize, shift: usize, stride: usize) -> Vec<T> {
        let mut out = vec![T::zero(); c * stride];
        let (oh, ow) = (self.oh, self.ow);
        for bi in 0..self.b {
            for ch in 0..c {
                let src = &y[(bi * c + ch) * oh * ow..][..oh * ow];
                let row = &mut out[ch * stride + shift + bi * self.img..];
                for oy in 0..oh {
                    row[oy * self.wp..oy * self.wp + ow].copy_from_slice(&src[oy * ow..(oy + 1) * ow]);
                }
            }
        }
        out
    }
}

/// A channel-major buffer: `count` rows of `stride` values.
#[derive(Clone, Copy)]
struct Rows<'a, T> {
    data: &'a [T],
    stride: usize,
    count: usize,
}

/// `out[o][p] = Σ_c Σ_t wt[c][t][o] · inp[c][p + taps[t]]` for every `p` in
/// `ranges`. `wt` holds `cout_pad` (a multiple of `OB_WIDE`) weights per `(c, t)`
/// and `out` has `cout_pad` rows of `out_stride`.
fn correlate<T: Scalar>(
    inp: Rows<'_, T>,
    taps: &[usize],
    wt: &[T],
    cout_pad: usize,
    out: &mut [T],
    out_stride: usize,
    ranges: &Ranges,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            correlate_avx512(inp, taps, wt, cout_pad, out, out_stride, ranges);
            return;
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { correlate_fma(inp, taps, wt, cout_pad, out, out_stride, ranges) };
            return;
        }
    }
    correlate_body::<T, false, OB>(inp, taps, wt, cout_pad, out, out_stride, ranges)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_fma<T: Scalar>(
    inp: Rows<'_, T>,
    taps: &[usize],
    wt: &[T],
    cout_pad: usize,
    out: &mut [T],
    out_stride: usize,
    ranges: &Ranges,
) {
    correlate_body::<T, true, OB>(inp, taps, wt, cout_pad, out, out_stride, ranges)
}

#[cfg(target_arch = "x86_64")]
fn correlate_avx512<T: Scalar>(
    inp: Rows<'_, T>,
    taps: &[usize],
    wt: &[T],
    cout_pad: usize,
    out: &mut [T],
    out_stride: usize,
    ranges: &Ranges,
) {
    use std::any::TypeId;
    use std::slice::from_raw_parts;
    let reach = taps.iter().copied().max().unwrap_or(0);
    let end = ranges.reach_end(LANES);
    assert!(cout_pad % OB_WIDE == 0 && end <= out_stride && out.len() >= cout_pad * out_stride);
    assert!(wt.len() >= inp.count * taps.len() * cout_pad);
    assert!(end + reach <= inp.stride && inp.data.len() >= inp.count * inp.stride);
    // SAFETY: T is exactly the type it is reinterpreted as; bounds were
    // checked above and the features are detected by the caller.
    unsafe {
        if TypeId::of::<T>() == TypeId::of::<f64>() {
            let cast = |s: &[T]| from_raw_parts(s.as_ptr() as *const f64, s.len());
            let o = std::slice::from_raw_parts_mut(out.as_mut_ptr() as *mut f64, out.len());
            avx512::correlate_f64(cast(inp.data), inp.stride, inp.count, taps, cast(wt), cout_pad, o, out_stride, ranges);
        } else if TypeId::of::<T>() == TypeId::of::<f32>() {
            let cast = |s: &[T]| from_raw_parts(s.as_ptr() as *const f32, s.len());
            let o = std::slice::from_raw_parts_mut(out.as_mut_ptr() as *mut f32, out.len());
            avx512::correlate_f32(cast(inp.data), inp.stride, inp.count, taps, cast(wt), cout_pad, o, out_stride, ranges);
        } else {
            correlate_body::<T, true, OB>(inp, taps, wt, cout_pad, out, out_stride, ranges)
        }
    }
}

/// Hand-blocked AVX-512 kernels. The correlation holds `OB_WIDE` output
/// channels by `LANES` positions in sixteen (f64) or eight (f32) vector
/// accumulators; the weight gradient a `WO`×`WT` tile of vectors.
#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
mod avx512 {
    use super::{round_up, Ranges, Rows, CHUNK, LANES, OB_WIDE, WL_WIDE, WO, WT};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn correlate_f64(
        inp: &[f64],
        in_stride: usize,
        cin: usize,
        taps: &[usize],
        wt: &[f64],
        cout_pad: usize,
        out: &mut [f64],
        out_stride: usize,
        ranges: &Ranges,
    ) {
        let nt = taps.len();
        let ip = inp.as_ptr();
        let wp = wt.as_ptr();
        let op = out.as_mut_ptr();
        for p0 in ranges.steps(LANES) {
            for ob in (0..cout_pad).step_by(OB_WIDE) {
                let mut lo = [_mm512_setzero_pd(); OB_WIDE];
                let mut hi = [_mm512_setzero_pd(); OB_WIDE];
                for c in 0..cin {
                    let row = ip.add(c * in_stride + p0);
                    let wrow = wp.add(c * nt * cout_pad + ob);
                    for (t, &off) in taps.iter().enumerate() {
                        let x0 = _mm512_loadu_pd(row.add(off));
                        let x1 = _mm512_loadu_pd(row.add(off + 8));
                        let w = wrow.add(t * cout_pad);
                        for i in 0..OB_WIDE {
                            let wi = _mm512_set1_pd(*w.add(i));
                            lo[i] = _mm512_fmadd_pd(wi, x0, lo[i]);
                            hi[i] = _mm512_fmadd_pd(wi, x1, hi[i]);
                        }
                    }
                }
                for i in 0..OB_WIDE {
                    let dst = op.add((ob + i) * out_stride + p0);
                    _mm512_storeu_pd(dst, lo[i]);
                    _mm512_storeu_pd(dst.add(8), hi[i]);
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn correlate_f32(
        inp: &[f32],
        in_stride: usize,
        cin: usize,
        taps: &[usize],
        wt: &[f32],
        cout_pad: usize,
        out: &mut [f32],
        out_stride: usize,
        ranges: &Ranges,
    ) {
        let nt = taps.len();
        let ip = inp.as_ptr();
        let wp = wt.as_ptr();
        let op = out.as_mut_ptr();
        for p0 in ranges.steps(LANES) {
            for ob in (0..cout_pad).step_by(OB_WIDE) {
                let mut acc = [_mm512_setzero_ps(); OB_WIDE];
                for c in 0..cin {
                    let row = ip.add(c * in_stride + p0);
                    let wrow = wp.add(c * nt * cout_pad + ob);
                    for (t, &off) in taps.iter().enumerate() {
                        let x = _mm512_loadu_ps(row.add(off));
                        let w = wrow.add(t * cout_pad);
                        for i in 0..OB_WIDE {
                            acc[i] = _mm512_fmadd_ps(_mm512_set1_ps(*w.add(i)), x, acc[i]);
                        }
                    }
                }
                for (i, a) in acc.into_iter().enumerate() {
                    _mm512_storeu_ps(op.add((ob + i) * out_stride + p0), a);
                }
            }
        }
    }

    macro_rules! weight_grad_kernel {
        ($name:ident, $t:ty, $lanes:expr, $zero:ident, $load:ident, $fma:ident, $reduce:ident) => {
            #[target_feature(enable = "avx512f")]
            pub(super) unsafe fn $name(dy: Rows<'_, $t>, inp: Rows<'_, $t>, taps: &[usize], dw: &mut [$t], ranges: &Ranges) {
                let (cout, cin, nt) = (dy.count, inp.count, taps.len());
                let cout_pad = round_up(cout, WO);
                let nt_pad = round_up(nt, WT);
                let mut offs = taps.to_vec();
                offs.resize(nt_pad, 0);
                let zero_row = vec![0.0 as $t; dy.stride];
                let rows: Vec<*const $t> = (0..cout_pad)
                    .map(|o| if o < cout { dy.data.as_ptr().add(o * dy.stride) } else { zero_row.as_ptr() })
                    .collect();
                let chunks: Vec<(usize, usize)> = ranges
                    .rounded(WL_WIDE)
                    .into_iter()
                    .flat_map(|(s, e)| (s..e).step_by(CHUNK).map(move |c| (c, (c + CHUNK).min(e))))
                    .collect();
                let mut acc_all = vec![0.0 as $t; cout_pad * cin * nt_pad];
                for &(p0, p1) in &chunks {
                    for ob in (0..cout_pad).step_by(WO) {
                        for c in 0..cin {
                            let row = inp.data.as_ptr().add(c * inp.stride);
                            for tb in (0..nt_pad).step_by(WT) {
                                let mut acc = [[$zero(); WT]; WO];
                                let mut p = p0;
                                while p < p1 {
                                    let x: [_; WT] = std::array::from_fn(|t| $load(row.add(p + offs[tb + t])));
                                    for o in 0..WO {
                                        let d = $load(rows[ob + o].add(p));
                                        for t in 0..WT {
                                            acc[o][t] = $fma(d, x[t], acc[o][t]);
                                        }
                                    }
                                    p += $lanes;
                                }
                                for o in 0..WO {
                                    for t in 0..WT {
                                        acc_all[((ob + o) * cin + c) * nt_pad + tb + t] += $reduce(acc[o][t]);
                                    }
                                }
                            }
                        }
                    }
                }
                for o in 0..cout {
                    for c in 0..cin {
                        let src = &acc_all[(o * cin + c) * nt_pad..][..nt];
                        dw[(o * cin + c) * nt..(o * cin + c + 1) * nt].copy_from_slice(src);
                    }
                }
            }
        };
    }

    weight_grad_kernel!(weight_grad_f64, f64, 8, _mm512_setzero_pd, _mm512_loadu_pd, _mm512_fmadd_pd, _mm512_reduce_add_pd);
    weight_grad_kernel!(weight_grad_f32, f32, 16, _mm512_setzero_ps, _mm512_loadu_ps, _mm512_fmadd_ps, _mm512_reduce_add_ps);
}

#[inline(always)]
fn correlate_body<T: Scalar, const FMA: bool, const B: usize>(
    inp: Rows<'_, T>,
    taps: &[usize],
    wt: &[T],
    cout_pad: usize,
    out: &mut [T],
    out_stride: usize,
    ranges: &Ranges,
) {
    let nt = taps.len();
    let reach = taps.iter().copied().max().unwrap_or(0);
    let end = ranges.reach_end(LANES);
    assert!(cout_pad % B == 0 && end <= out_stride && out.len() >= cout_pad * out_stride);
    assert!(wt.len() >= inp.count * nt * cout_pad);
    assert!(end + reach <= inp.stride && inp.data.len() >= inp.count * inp.stride);
    for p0 in ranges.steps(LANES) {
        for ob in (0..cout_pad).step_by(B) {
            let mut acc = [[T::zero(); LANES]; B];
            for c in 0..inp.count {
                let row = &inp.data[c * inp.stride + p0..c * inp.stride + p0 + reach + LANES];
                let wrow = &wt[c * nt * cout_pad..(c + 1) * nt * cout_pad];
                for (t, &off) in taps.iter().enumerate() {
                    // SAFETY: off <= reach, so off + LANES <= row.len(); and
                    // t·cout_pad + ob + B <= nt·cout_pad = wrow.len().
                    let (x, w) = unsafe {
                        (
                            *(row.as_ptr().add(off) as *const [T; LANES]),
                            *(wrow.as_ptr().add(t * cout_pad + ob) as *const [T; B]),
                        )
                    };
                    acc = fma_block::<T, FMA, B>(acc, &w, &x);
                }
            }
            // element-wise copy keeps `acc` in registers
            for (i, a) in acc.into_iter().enumerate() {
                let dst = &mut out[(ob + i) * out_stride + p0..(ob + i) * out_stride + p0 + LANES];
                for (d, v) in dst.iter_mut().zip(a) {
                    *d = v;
                }
            }
        }
    }
}

#[inline(always)]
fn fma_block<T: Scalar, const FMA: bool, const B: usize>(
    mut acc: [[T; LANES]; B],
    w: &[T; B],
    x: &[T; LANES],
) -> [[T; LANES]; B] {
    for i in 0..B {
        for l in 0..LANES {
            acc[i][l] = if FMA {
                w[i].mul_add(x[l], acc[i][l])
            } else {
                w[i] * x[l] + acc[i][l]
            };
        }
    }
    acc
}

/// `dw[o][c][t] = Σ_p dy[o][p] · inp[c][p + taps[t]]` over `ranges`
/// (overwritten). `dy` must be zero wherever rounding extends a range.
fn weight_grad<T: Scalar>(dy: Rows<'_, T>, inp: Rows<'_, T>, taps: &[usize], dw: &mut [T], ranges: &Ranges) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            weight_grad_avx512(dy, inp, taps, dw, ranges);
            return;
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { weight_grad_fma(dy, inp, taps, dw, ranges) };
            return;
        }
    }
    weight_grad_body::<T, false>(dy, inp, taps, dw, ranges)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_fma<T: Scalar>(dy: Rows<'_, T>, inp: Rows<'_, T>, taps: &[usize], dw: &mut [T], ranges: &Ranges) {
    weight_grad_body::<T, true>(dy, inp, taps, dw, ranges)
}

#[cfg(target_arch = "x86_64")]
fn weight_grad_avx512<T: Scalar>(dy: Rows<'_, T>, inp: Rows<'_, T>, taps: &[usize], dw: &mut [T], ranges: &Ranges) {
    use std::any::TypeId;
    use std::slice::from_raw_parts;
    let reach = taps.iter().copied().max().unwrap_or(0);
    let end = ranges.reach_end(WL_WIDE);
    assert!(end <= dy.stride && dy.data.len() >= dy.count * dy.stride);
    assert!(end + reach <= inp.stride && inp.data.len() >= inp.count * inp.stride);
    assert!(dw.len() >= dy.count * inp.count * taps.len());
    // SAFETY: as in `correlate_avx512`.
    unsafe {
        if TypeId::of::<T>() == TypeId::of::<f64>() {
            let cast = |r: Rows<'_, T>| Rows {
                data: from_raw_parts(r.data.as_ptr() as *const f64, r.data.len()),
                stride: r.stride,
                count: r.count,
            };
            let d = std::slice::from_raw_parts_mut(dw.as_mut_ptr() as *mut f64, dw.len());
            avx512::weight_grad_f64(cast(dy), cast(inp), taps, d, ranges);
        } else if TypeId::of::<T>() == TypeId::of::<f32>() {
            let cast = |r: Rows<'_, T>| Rows {
                data: from_raw_parts(r.data.as_ptr() as *const f32, r.data.len()),
                stride: r.stride,
                count: r.count,
            };
            let d = std::slice::from_raw_parts_mut(dw.as_mut_ptr() as *mut f32, dw.len());
            avx512::weight_grad_f32(cast(dy), cast(inp), taps, d, ranges);
        } else {
            weight_grad_body::<T, true>(dy, inp, taps, dw, ranges)
        }
    }
}

#[inline(always)]
fn weight_grad_body<T: Scalar, const FMA: bool>(
    dy: Rows<'_, T>,
    inp: Rows<'_, T>,
    taps: &[usize],
    dw: &mut [T],
    ranges: &Ranges,
) {
    let (cout, cin, nt) = (dy.count, inp.count, taps.len());
    let reach = taps.iter().copied().max().unwrap_or(0);
    let end = ranges.reach_end(WL);
    assert!(end <= dy.stride && dy.data.len() >= cout * dy.stride);
    assert!(end + reach <= inp.stride && inp.data.len() >= cin * inp.stride);
    assert!(dw.len() >= cout * cin * nt);
    // pad rows and taps to whole tiles; padding reads a zero row / offset 0
    let cout_pad = round_up(cout, WO);
    let nt_pad = round_up(nt, WT);
    let mut offs = taps.to_vec();
    offs.resize(nt_pad, 0);
    let zero_row = vec![T::zero(); dy.stride];
    let rows: Vec<&[T]> = (0..cout_pad)
        .map(|o| if o < cout { &dy.data[o * dy.stride..(o + 1) * dy.stride] } else { &zero_row[..] })
        .collect();
    let chunks: Vec<(usize, usize)> = ranges
        .rounded(WL)
        .into_iter()
        .flat_map(|(s, e)| (s..e).step_by(CHUNK).map(move |c| (c, (c + CHUNK).min(e))))
        .collect();
    let mut acc_all = vec![T::zero(); cout_pad * cin * nt_pad];
    for &(p0, p1) in &chunks {
        for ob in (0..cout_pad).step_by(WO) {
            for c in 0..cin {
                let row = &inp.data[c * inp.stride..c * inp.stride + p1 + reach];
                for tb in (0..nt_pad).step_by(WT) {
                    let mut acc = [[[T::zero(); WL]; WT]; WO];
                    for p in (p0..p1).step_by(WL) {
                        // SAFETY: p + WL <= p1 <= end <= dy.stride, and
                        // p + offs[..] + WL <= p1 + reach = row.len().
                        let (d, x) = unsafe {
                            let d: [[T; WL]; WO] =
                                std::array::from_fn(|o| *(rows[ob + o].as_ptr().add(p) as *const [T; WL]));
                            let x: [[T; WL]; WT] =
                                std::array::from_fn(|t| *(row.as_ptr().add(p + offs[tb + t]) as *const [T; WL]));
                            (d, x)
                        };
                        acc = outer_block::<T, FMA>(acc, &d, &x);
                    }
                    for (o, a) in acc.into_iter().enumerate() {
                        for (t, v) in a.into_iter().enumerate() {
                            let s: T = v.into_iter().sum();
                            acc_all[((ob + o) * cin + c) * nt_pad + tb + t] += s;
                        }
                    }
                }
            }
        }
    }
    for o in 0..cout {
        for c in 0..cin {
            let src = &acc_all[(o * cin + c) * nt_pad..][..nt];
            dw[(o * cin + c) * nt..(o * cin + c + 1) * nt].copy_from_slice(src);
        }
    }
}

#[inline(always)]
fn outer_block<T: Scalar, const FMA: bool>(
    mut acc: [[[T; WL]; WT]; WO],
    d: &[[T; WL]; WO],
    x: &[[T; WL]; WT],
) -> [[[T; WL]; WT]; WO] {
    for o in 0..WO {
        for t in 0..WT {
            for l in 0..WL {
                acc[o][t][l] = if FMA {
                    d[o][l].mul_add(x[t][l], acc[o][t][l])
                } else {
                    d[o][l] * x[t][l] + acc[o][t][l]
                };
            }
        }
    }
    acc
}

/// `[cout, cin, k, k]` weights as `[cin][tap][cout_pad]`, or with the kernel
/// flipped and channel roles swapped as `[cout][tap][cin_pad]`.
fn arrange_weights<T: Scalar>(w: &[T], cout: usize, cin: usize, k: usize, transpose: bool) -> (Vec<T>, usize) {
    let kk = k * k;
    let (rows, cols) = if transpose { (cout, cin) } else { (cin, cout) };
    let cols_pad = round_up(cols, OB_WIDE);
    let mut out = vec![T::zero(); rows * kk * cols_pad];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..kk {
                let v = w[(o * cin + c) * kk + t];
                if transpose {
                    out[(o * kk + (kk - 1 - t)) * cols_pad + c] = v;
                } else {
                    out[(c * kk + t) * cols_pad + o] = v;
                }
            }
        }
    }
    (out, cols_pad)
}

/// Forward pass into `y: [B, cout, oh, ow]` (overwritten).
pub(crate) fn conv_forward<T: Scalar>(g: &Geometry, x: &[T], cin: usize, w: &[T], cout: usize, y: &mut [T]) {
    let ranges = g.output_ranges();
    let out_stride = ranges.reach_end(LANES);
    let in_stride = (out_stride + g.reach()).max(g.front + g.b * g.img);
    let xp = g.pad_input(x, cin, in_stride);
    let (wt, cout_pad) = arrange_weights(w, cout, cin, g.k, false);
    let mut out = vec![T::zero(); cout_pad * out_stride];
    let inp = Rows {
        data: &xp,
        stride: in_stride,
        count: cin,
    };
    correlate(inp, &g.taps(), &wt, cout_pad, &mut out, out_stride, &ranges);
    let (oh, ow) = (g.oh, g.ow);
    for bi in 0..g.b {
        for o in 0..cout {
            let dst = &mut y[(bi * cout + o) * oh * ow..][..oh * ow];
            let src = &out[o * out_stride + bi * g.img..];
            for oy in 0..oh {
                dst[oy * ow..(oy + 1) * ow].copy_from_slice(&src[oy * g.wp..oy * g.wp + ow]);
            }
        }
    }
}

/// Weight gradient (overwritten) and, if requested, input gradient
/// (overwritten) for `dy: [B, cout, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
) {
    let taps = g.taps();
    let reach = g.reach();

    // dW[o, c, t] = Σ_p dY[o, p] · xp[c, p + tap_t]
    let ranges = g.output_ranges();
    let dy_stride = ranges.reach_end(WL_WIDE).max(g.b * g.img);
    let in_stride = (dy_stride + reach).max(g.front + g.b * g.img);
    let xp = g.pad_input(x, cin, in_stride);
    let dyg = g.grid_output(dy, cout, 0, dy_stride);
    let dyr = Rows {
        data: &dyg,
        stride: dy_stride,
        count: cout,
    };
    let inp = Rows {
        data: &xp,
        stride: in_stride,
        count: cin,
    };
    weight_grad(dyr, inp, &taps, dw, &ranges);

    if let Some(dx) = dx {
        // dX[q] = Σ_t W[t] · dY[q - tap_t]: shifting dY by `reach` turns this
        // into a correlation with the flipped kernel over the same taps.
        let ranges = g.input_ranges();
        let out_stride = ranges.reach_end(LANES);
        let stride = (out_stride + reach).max(reach + g.b * g.img);
        let dyp = g.grid_output(dy, cout, reach, stride);
        let (wt, cin_pad) = arrange_weights(w, cout, cin, g.k, true);
        let mut out = vec![T::zero(); cin_pad * out_stride];
        let inp = Rows {
            data: &dyp,
            stride,
            count: cout,
        };
        correlate(inp, &taps, &wt, cin_pad, &mut out, out_stride, &ranges);
        let (h, wd) = (g.h, g.w);
        for bi in 0..g.b {
            for c in 0..cin {
                let dst = &mut dx[(bi * cin + c) * h * wd..][..h * wd];
                let src = &out[c * out_stride + g.front + bi * g.img..];
                for y in 0..h {
                    dst[y * wd..(y + 1) * wd].copy_from_slice(&src[y * g.wp..y * g.wp + wd]);
                }
            }
        }
    }
}

//! Dense numeric kernels behind the tape ops.
//!
//! Everything here is single-threaded and written so the inner loops
//! autovectorize: accumulation order is fixed, so results are bitwise
//! reproducible run-to-run. `mul_add` is used deliberately — it lowers to a
//! hardware FMA, which is a single correctly-rounded (and thus deterministic)
//! instruction.

use crate::scalar::Scalar;

/// Output spatial extent of a conv/pool window, or None if the window does
/// not fit the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if span > padded || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// out[j] += a0*b0[j] for all j.
#[inline]
fn axpy1<T: Scalar>(out: &mut [T], a0: T, b0: &[T]) {
    let n = out.len();
    for j in 0..n {
        out[j] = a0.mul_add(b0[j], out[j]);
    }
}

/// out[j] += a0*b0[j] + a1*b1[j] + a2*b2[j] + a3*b3[j] for all j.
#[inline]
fn axpy4<T: Scalar>(out: &mut [T], a: [T; 4], b0: &[T], b1: &[T], b2: &[T], b3: &[T]) {
    let n = out.len();
    for j in 0..n {
        let acc = a[0].mul_add(b0[j], out[j]);
        let acc = a[1].mul_add(b1[j], acc);
        let acc = a[2].mul_add(b2[j], acc);
        out[j] = a[3].mul_add(b3[j], acc);
    }
}

/// out(m,n) += a(m,k) * b(k,n), all row-major.
pub fn gemm_accum<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            axpy4(
                orow,
                [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]],
                &b[p * n..(p + 1) * n],
                &b[(p + 1) * n..(p + 2) * n],
                &b[(p + 2) * n..(p + 3) * n],
                &b[(p + 3) * n..(p + 4) * n],
            );
            p += 4;
        }
        while p < k {
            axpy1(orow, arow[p], &b[p * n..(p + 1) * n]);
            p += 1;
        }
    }
}

/// Dot product with a fixed 8-lane accumulation order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Sum with the same fixed 8-lane order as `dot`.
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l];
        }
    }
    let mut tail = T::zero();
    for v in &a[chunks * 8..] {
        tail += *v;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Valid output range along one axis: indices o with
/// 0 <= o*stride + tap - padding < input.
#[inline]
fn valid_range(out: usize, input: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > tap { (padding - tap).div_ceil(stride) } else { 0 };
    let hi_raw = if input + padding > tap { (input - 1 + padding - tap) / stride + 1 } else { 0 };
    (lo.min(out), hi_raw.min(out))
}

/// Direct 1x1 stride-1 grouped convolution: a pure GEMM per sample/group,
/// no unfold copies. Carries the bulk of the pointwise FLOPs.
pub fn conv1x1_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    hw: usize,
    groups: usize,
) {
    let (cg, og) = (c / groups, o / groups);
    for ni in 0..n {
        for g in 0..groups {
            let xblk = &x[(ni * c + g * cg) * hw..(ni * c + (g + 1) * cg) * hw];
            let wblk = &w[g * og * cg..(g + 1) * og * cg];
            let oblk = &mut out[(ni * o + g * og) * hw..(ni * o + (g + 1) * og) * hw];
            gemm_accum(wblk, xblk, oblk, og, cg, hw);
        }
    }
}

pub fn conv1x1_bwd_dx<T: Scalar>(
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    hw: usize,
    groups: usize,
) {
    let (cg, og) = (c / groups, o / groups);
    for ni in 0..n {
        for g in 0..groups {
            let wblk = &w[g * og * cg..(g + 1) * og * cg];
            let dyblk = &dy[(ni * o + g * og) * hw..(ni * o + (g + 1) * og) * hw];
            let dxblk = &mut dx[(ni * c + g * cg) * hw..(ni * c + (g + 1) * cg) * hw];
            for i in 0..cg {
                let row = &mut dxblk[i * hw..(i + 1) * hw];
                for oi in 0..og {
                    axpy1(row, wblk[oi * cg + i], &dyblk[oi * hw..(oi + 1) * hw]);
                }
            }
        }
    }
}

pub fn conv1x1_bwd_dw<T: Scalar>(
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    n: usize,
    c: usize,
    o: usize,
    hw: usize,
    groups: usize,
) {
    let (cg, og) = (c / groups, o / groups);
    for ni in 0..n {
        for g in 0..groups {
            let xblk = &x[(ni * c + g * cg) * hw..(ni * c + (g + 1) * cg) * hw];
            let dyblk = &dy[(ni * o + g * og) * hw..(ni * o + (g + 1) * og) * hw];
            for oi in 0..og {
                let dyrow = &dyblk[oi * hw..(oi + 1) * hw];
                let wrow = &mut dw[(g * og + oi) * cg..(g * og + oi + 1) * cg];
                for i in 0..cg {
                    wrow[i] += dot(dyrow, &xblk[i * hw..(i + 1) * hw]);
                }
            }
        }
    }
}

/// Copies one channel plane into a zero-padded scratch buffer.
fn pad_plane<T: Scalar>(x: &[T], in_h: usize, in_w: usize, padding: usize, scratch: &mut [T]) {
    let pw = in_w + 2 * padding;
    debug_assert_eq!(scratch.len(), (in_h + 2 * padding) * pw);
    if padding > 0 {
        for v in scratch.iter_mut() {
            *v = T::zero();
        }
    }
    for y in 0..in_h {
        let dst = &mut scratch[(y + padding) * pw + padding..][..in_w];
        dst.copy_from_slice(&x[y * in_w..(y + 1) * in_w]);
    }
}

/// Single-pass stencil over one padded plane: out[oy,ox] += sum_t w[t] * pad[...].
/// TAPS is a compile-time constant so the tap loop fully unrolls and the ox
/// loop vectorizes.
fn dw_plane_accum<T: Scalar, const TAPS: usize>(
    pad: &[T],
    pw: usize,
    w: &[T],
    tap_off: &[usize; TAPS],
    out: &mut [T],
    out_h: usize,
    out_w: usize,
    stride: usize,
) {
    let mut wt = [T::zero(); TAPS];
    wt.copy_from_slice(&w[..TAPS]);
    for oy in 0..out_h {
        let base = oy * stride * pw;
        let orow = &mut out[oy * out_w..(oy + 1) * out_w];
        if stride == 1 {
            let rows: [&[T]; TAPS] = std::array::from_fn(|t| &pad[base + tap_off[t]..][..out_w]);
            for ox in 0..out_w {
                let mut acc = orow[ox];
                for t in 0..TAPS {
                    acc = wt[t].mul_add(rows[t][ox], acc);
                }
                orow[ox] = acc;
            }
        } else {
            for ox in 0..out_w {
                let xb = base + ox * stride;
                let mut acc = orow[ox];
                for t in 0..TAPS {
                    acc = wt[t].mul_add(pad[xb + tap_off[t]], acc);
                }
                orow[ox] = acc;
            }
        }
    }
}

fn dw_conv_plane<T: Scalar>(
    pad: &[T],
    pw: usize,
    w: &[T],
    out: &mut [T],
    kh: usize,
    kw: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
) {
    match kh * kw {
        9 => {
            let mut off = [0usize; 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    off[ky * 3 + kx] = ky * dilation * pw + kx * dilation;
                }
            }
            dw_plane_accum::<T, 9>(pad, pw, w, &off, out, out_h, out_w, stride);
        }
        25 => {
            let mut off = [0usize; 25];
            for ky in 0..5 {
                for kx in 0..5 {
                    off[ky * 5 + kx] = ky * dilation * pw + kx * dilation;
                }
            }
            dw_plane_accum::<T, 25>(pad, pw, w, &off, out, out_h, out_w, stride);
        }
        _ => {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = out[oy * out_w + ox];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let idx = (oy * stride + ky * dilation) * pw + ox * stride + kx * dilation;
                            acc = w[ky * kw + kx].mul_add(pad[idx], acc);
                        }
                    }
                    out[oy * out_w + ox] = acc;
                }
            }
        }
    }
}

/// Direct depthwise convolution (groups == C, one output channel per group).
/// Weight layout (C, 1, KH, KW).
pub fn depthwise_fwd<T: Scalar>(x: &[T], w: &[T], out: &mut [T], n: usize, c: usize, win: &Window) {
    let Window { in_h, in_w, kh, kw, stride, padding, dilation, out_h, out_w } = *win;
    let (ihw, ohw, khw) = (in_h * in_w, out_h * out_w, kh * kw);
    let pw = in_w + 2 * padding;
    let mut scratch = vec![T::zero(); (in_h + 2 * padding) * pw];
    for p in 0..n * c {
        let ch = p % c;
        pad_plane(&x[p * ihw..(p + 1) * ihw], in_h, in_w, padding, &mut scratch);
        dw_conv_plane(
            &scratch,
            pw,
            &w[ch * khw..(ch + 1) * khw],
            &mut out[p * ohw..(p + 1) * ohw],
            kh,
            kw,
            dilation,
            out_h,
            out_w,
            stride,
        );
    }
}

pub fn depthwise_bwd_dx<T: Scalar>(w: &[T], dy: &[T], dx: &mut [T], n: usize, c: usize, win: &Window) {
    let Window { in_h, in_w, kh, kw, stride, padding, dilation, out_h, out_w } = *win;
    let (ihw, ohw, khw) = (in_h * in_w, out_h * out_w, kh * kw);
    // At stride 1 the input gradient is itself a depthwise convolution of dy
    // with the flipped kernel and padding d*(k-1)-p, so the fast forward
    // stencil is reused. (Our op set keeps d*(k-1) >= p throughout.)
    if stride == 1 && dilation * (kh - 1) >= padding && dilation * (kw - 1) >= padding {
        let bp_h = dilation * (kh - 1) - padding;
        let bp_w = dilation * (kw - 1) - padding;
        if bp_h == bp_w {
            let pw = out_w + 2 * bp_w;
            let mut scratch = vec![T::zero(); (out_h + 2 * bp_h) * pw];
            let mut flipped = vec![T::zero(); khw];
            for p in 0..n * c {
                let ch = p % c;
                for t in 0..khw {
                    flipped[t] = w[ch * khw + (khw - 1 - t)];
                }
                pad_plane(&dy[p * ohw..(p + 1) * ohw], out_h, out_w, bp_w, &mut scratch);
                dw_conv_plane(
                    &scratch,
                    pw,
                    &flipped,
                    &mut dx[p * ihw..(p + 1) * ihw],
                    kh,
                    kw,
                    dilation,
                    in_h,
                    in_w,
                    1,
                );
            }
            return;
        }
    }
    // General scatter form (stride-2 reduction edges).
    for p in 0..n * c {
        let ch = p % c;
        let dplane = &dy[p * ohw..(p + 1) * ohw];
        let xplane = &mut dx[p * ihw..(p + 1) * ihw];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(out_h, in_h, ky * dilation, stride, padding);
            for kx in 0..kw {
                let a = w[ch * khw + ky * kw + kx];
                let (ox_lo, ox_hi) = valid_range(out_w, in_w, kx * dilation, stride, padding);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky * dilation - padding;
                    let drow = &dplane[oy * out_w..(oy + 1) * out_w];
                    let xrow = &mut xplane[iy * in_w..(iy + 1) * in_w];
                    if stride == 1 {
                        let off = ox_lo + kx * dilation - padding;
                        axpy1(&mut xrow[off..off + (ox_hi - ox_lo)], a, &drow[ox_lo..ox_hi]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx * dilation - padding;
                            xrow[ix] = a.mul_add(drow[ox], xrow[ix]);
                        }
                    }
                }
            }
        }
    }
}

pub fn depthwise_bwd_dw<T: Scalar>(x: &[T], dy: &[T], dw: &mut [T], n: usize, c: usize, win: &Window) {
    let Window { in_h, in_w, kh, kw, stride, padding, dilation, out_h, out_w } = *win;
    let (ihw, ohw, khw) = (in_h * in_w, out_h * out_w, kh * kw);
    let pw = in_w + 2 * padding;
    let mut scratch = vec![T::zero(); (in_h + 2 * padding) * pw];
    for p in 0..n * c {
        let ch = p % c;
        pad_plane(&x[p * ihw..(p + 1) * ihw], in_h, in_w, padding, &mut scratch);
        let dplane = &dy[p * ohw..(p + 1) * ohw];
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = T::zero();
                if stride == 1 {
                    for oy in 0..out_h {
                        let base = (oy + ky * dilation) * pw + kx * dilation;
                        acc += dot(&dplane[oy * out_w..(oy + 1) * out_w], &scratch[base..base + out_w]);
                    }
                } else {
                    for oy in 0..out_h {
                        let base = (oy * stride + ky * dilation) * pw + kx * dilation;
                        let drow = &dplane[oy * out_w..(oy + 1) * out_w];
                        for ox in 0..out_w {
                            acc = drow[ox].mul_add(scratch[base + ox * stride], acc);
                        }
                    }
                }
                dw[ch * khw + ky * kw + kx] += acc;
            }
        }
    }
}

/// Window geometry shared by im2col/col2im.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Unfolds one sample's channel block `(c, H, W)` into a column matrix of
/// shape `(c*kh*kw, out_h*out_w)`, zero-padding out-of-range taps.
pub fn im2col<T: Scalar>(x: &[T], channels: usize, win: &Window, col: &mut [T]) {
    let Window { in_h, in_w, kh, kw, stride, padding, dilation, out_h, out_w } = *win;
    debug_assert_eq!(x.len(), channels * in_h * in_w);
    debug_assert_eq!(col.len(), channels * kh * kw * out_h * out_w);
    let ow = out_w;
    for c in 0..channels {
        let plane = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * out_h * out_w..][..out_h * out_w];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= in_h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        dst[ox] = if ix < 0 || ix >= in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of `im2col`: scatter-adds a column matrix back into the input
/// layout. Used for conv input gradients.
pub fn col2im_add<T: Scalar>(col: &[T], channels: usize, win: &Window, x: &mut [T]) {
    let Window { in_h, in_w, kh, kw, stride, padding, dilation, out_h, out_w } = *win;
    debug_assert_eq!(x.len(), channels * in_h * in_w);
    debug_assert_eq!(col.len(), channels * kh * kw * out_h * out_w);
    for c in 0..channels {
        let plane = &mut x[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * out_h * out_w..][..out_h * out_w];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                    let src = &row[oy * out_w..(oy + 1) * out_w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < in_w as isize {
                            dst[ix as usize] += src[ox];
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

    #[test]
    fn out_dim_matches_formula() {
        // 8 + 2*1 - 1*(3-1) - 1 = 7; 7/1 + 1 = 8
        assert_eq!(conv_out_dim(8, 3, 1, 1, 1), Some(8));
        assert_eq!(conv_out_dim(8, 3, 2, 1, 1), Some(4));
        assert_eq!(conv_out_dim(4, 2, 2, 0, 1), Some(2));
        assert_eq!(conv_out_dim(5, 5, 1, 4, 2), Some(5));
        assert_eq!(conv_out_dim(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn gemm_small_case() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        gemm_accum(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_matches_naive_on_odd_k() {
        let m = 3;
        let k = 7;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.11 + 0.5).collect();
        let mut fast = vec![0.0; m * n];
        gemm_accum(&a, &b, &mut fast, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc = a[i * k + p].mul_add(b[p * n + j], acc);
                }
                assert!((fast[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> pins col2im as the exact transpose.
        let win = Window { in_h: 5, in_w: 4, kh: 3, kw: 3, stride: 2, padding: 1, dilation: 1, out_h: 3, out_w: 2 };
        let c = 2;
        let x: Vec<f64> = (0..c * 20).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let cols = c * 9 * 6;
        let y: Vec<f64> = (0..cols).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let mut col = vec![0.0; cols];
        im2col(&x, c, &win, &mut col);
        let lhs = dot(&col, &y);
        let mut xt = vec![0.0; x.len()];
        col2im_add(&y, c, &win, &mut xt);
        let rhs = dot(&x, &xt);
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}

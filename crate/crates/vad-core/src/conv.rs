//! Raw NCHW convolution kernels shared by the autodiff graph.
//!
//! Layouts: input [N,C,H,W], kernel [F,C,kh,kw], output [N,F,H',W'] with
//! H' = (H + 2*pad - kh)/stride + 1 (exact division enforced by the caller).
//! Transposed convolution reuses the same three primitives with the roles of
//! input and output swapped.

use crate::scalar::Scalar;

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

fn pad_nchw<S: Scalar>(x: &[S], n: usize, c: usize, h: usize, w: usize, pad: usize) -> Vec<S> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![S::ZERO; n * c * hp * wp];
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * hp * wp..(img + 1) * hp * wp];
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            let d = &mut dst[(y + pad) * wp + pad..(y + pad) * wp + pad + w];
            d.copy_from_slice(s);
        }
    }
    out
}

fn unpad_nchw<S: Scalar>(xp: &[S], n: usize, c: usize, h: usize, w: usize, pad: usize) -> Vec<S> {
    if pad == 0 {
        return xp.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![S::ZERO; n * c * h * w];
    for img in 0..n * c {
        let src = &xp[img * hp * wp..(img + 1) * hp * wp];
        let dst = &mut out[img * h * w..(img + 1) * h * w];
        for y in 0..h {
            dst[y * w..(y + 1) * w]
                .copy_from_slice(&src[(y + pad) * wp + pad..(y + pad) * wp + pad + w]);
        }
    }
    out
}

/// out_row[ox] += kval * x_row[ox * stride + offset].
#[inline(always)]
fn axpy_rows<S: Scalar>(out_row: &mut [S], x_row: &[S], kval: S, stride: usize, offset: usize) {
    if stride == 1 {
        let len = out_row.len();
        for (slot, xv) in out_row.iter_mut().zip(&x_row[offset..offset + len]) {
            *slot += kval * *xv;
        }
    } else {
        for (ox, slot) in out_row.iter_mut().enumerate() {
            *slot += kval * x_row[ox * stride + offset];
        }
    }
}

/// Padded input split into even/odd column phases so stride-2 convolutions
/// run on contiguous rows. `half` columns per phase, zero padded at the tail.
struct PhasedPlanes<S> {
    even: Vec<S>,
    odd: Vec<S>,
    half: usize,
}

fn split_phases<S: Scalar>(xp: &[S], planes: usize, hp: usize, wp: usize) -> PhasedPlanes<S> {
    let half = wp / 2 + 1;
    let mut even = vec![S::ZERO; planes * hp * half];
    let mut odd = vec![S::ZERO; planes * hp * half];
    for row in 0..planes * hp {
        let src = &xp[row * wp..(row + 1) * wp];
        let e = &mut even[row * half..(row + 1) * half];
        let o = &mut odd[row * half..(row + 1) * half];
        for (i, v) in src.iter().enumerate() {
            if i % 2 == 0 {
                e[i / 2] = *v;
            } else {
                o[i / 2] = *v;
            }
        }
    }
    PhasedPlanes { even, odd, half }
}

fn merge_phases<S: Scalar>(phases: &PhasedPlanes<S>, planes: usize, hp: usize, wp: usize) -> Vec<S> {
    let half = phases.half;
    let mut out = vec![S::ZERO; planes * hp * wp];
    for row in 0..planes * hp {
        let dst = &mut out[row * wp..(row + 1) * wp];
        let e = &phases.even[row * half..(row + 1) * half];
        let o = &phases.odd[row * half..(row + 1) * half];
        for (i, v) in dst.iter_mut().enumerate() {
            *v = if i % 2 == 0 { e[i / 2] } else { o[i / 2] };
        }
    }
    out
}

pub fn conv2d_fwd<S: Scalar>(x: &[S], k: &[S], d: &ConvDims) -> Vec<S> {
    let (hp, wp) = (d.in_h + 2 * d.pad, d.in_w + 2 * d.pad);
    let xp = pad_nchw(x, d.batch, d.in_ch, d.in_h, d.in_w, d.pad);
    let phases = (d.stride == 2).then(|| split_phases(&xp, d.batch * d.in_ch, hp, wp));
    let mut out = vec![S::ZERO; d.batch * d.out_ch * d.out_h * d.out_w];
    for n in 0..d.batch {
        for f in 0..d.out_ch {
            let out_base = (n * d.out_ch + f) * d.out_h * d.out_w;
            for c in 0..d.in_ch {
                let k_base = (f * d.in_ch + c) * d.kh * d.kw;
                for oy in 0..d.out_h {
                    let row_out = &mut out[out_base + oy * d.out_w..out_base + (oy + 1) * d.out_w];
                    for ky in 0..d.kh {
                        let row_idx = (n * d.in_ch + c) * hp + oy * d.stride + ky;
                        for kx in 0..d.kw {
                            let kval = k[k_base + ky * d.kw + kx];
                            match &phases {
                                Some(p) => {
                                    let bank = if kx % 2 == 0 { &p.even } else { &p.odd };
                                    let row = &bank[row_idx * p.half..(row_idx + 1) * p.half];
                                    axpy_rows(row_out, row, kval, 1, kx / 2);
                                }
                                None => {
                                    let row = &xp[row_idx * wp..(row_idx + 1) * wp];
                                    axpy_rows(row_out, row, kval, d.stride, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: scatter `g` through the kernel.
/// This is also the forward pass of the transposed convolution.
pub fn conv2d_bwd_input<S: Scalar>(g: &[S], k: &[S], d: &ConvDims) -> Vec<S> {
    let (hp, wp) = (d.in_h + 2 * d.pad, d.in_w + 2 * d.pad);
    let planes = d.batch * d.in_ch;
    let mut dxp = vec![S::ZERO; planes * hp * wp];
    let mut phases = (d.stride == 2).then(|| PhasedPlanes {
        even: vec![S::ZERO; planes * hp * (wp / 2 + 1)],
        odd: vec![S::ZERO; planes * hp * (wp / 2 + 1)],
        half: wp / 2 + 1,
    });
    for n in 0..d.batch {
        for f in 0..d.out_ch {
            let g_base = (n * d.out_ch + f) * d.out_h * d.out_w;
            for c in 0..d.in_ch {
                let k_base = (f * d.in_ch + c) * d.kh * d.kw;
                for oy in 0..d.out_h {
                    let grow = &g[g_base + oy * d.out_w..g_base + (oy + 1) * d.out_w];
                    for ky in 0..d.kh {
                        let row_idx = (n * d.in_ch + c) * hp + oy * d.stride + ky;
                        for kx in 0..d.kw {
                            let kval = k[k_base + ky * d.kw + kx];
                            match &mut phases {
                                Some(p) => {
                                    let bank = if kx % 2 == 0 { &mut p.even } else { &mut p.odd };
                                    let row = &mut bank[row_idx * p.half..(row_idx + 1) * p.half];
                                    for (slot, gv) in
                                        row[kx / 2..kx / 2 + grow.len()].iter_mut().zip(grow)
                                    {
                                        *slot += kval * *gv;
                                    }
                                }
                                None => {
                                    let row = &mut dxp[row_idx * wp..(row_idx + 1) * wp];
                                    if d.stride == 1 {
                                        for (slot, gv) in
                                            row[kx..kx + grow.len()].iter_mut().zip(grow)
                                        {
                                            *slot += kval * *gv;
                                        }
                                    } else {
                                        for (ox, gv) in grow.iter().enumerate() {
                                            row[ox * d.stride + kx] += kval * *gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(p) = &phases {
        dxp = merge_phases(p, planes, hp, wp);
    }
    unpad_nchw(&dxp, d.batch, d.in_ch, d.in_h, d.in_w, d.pad)
}

/// Gradient w.r.t. the kernel: correlate the padded input with `g`.
pub fn conv2d_bwd_kernel<S: Scalar>(g: &[S], x: &[S], d: &ConvDims) -> Vec<S> {
    let (hp, wp) = (d.in_h + 2 * d.pad, d.in_w + 2 * d.pad);
    let xp = pad_nchw(x, d.batch, d.in_ch, d.in_h, d.in_w, d.pad);
    let phases = (d.stride == 2).then(|| split_phases(&xp, d.batch * d.in_ch, hp, wp));
    let mut dk = vec![S::ZERO; d.out_ch * d.in_ch * d.kh * d.kw];
    for n in 0..d.batch {
        for f in 0..d.out_ch {
            let g_base = (n * d.out_ch + f) * d.out_h * d.out_w;
            for c in 0..d.in_ch {
                let k_base = (f * d.in_ch + c) * d.kh * d.kw;
                for oy in 0..d.out_h {
                    let grow = &g[g_base + oy * d.out_w..g_base + (oy + 1) * d.out_w];
                    for ky in 0..d.kh {
                        let row_idx = (n * d.in_ch + c) * hp + oy * d.stride + ky;
                        for kx in 0..d.kw {
                            let mut acc = S::ZERO;
                            match &phases {
                                Some(p) => {
                                    let bank = if kx % 2 == 0 { &p.even } else { &p.odd };
                                    let row = &bank[row_idx * p.half..(row_idx + 1) * p.half];
                                    for (gv, xv) in grow.iter().zip(&row[kx / 2..kx / 2 + grow.len()]) {
                                        acc += *gv * *xv;
                                    }
                                }
                                None => {
                                    let row = &xp[row_idx * wp..(row_idx + 1) * wp];
                                    if d.stride == 1 {
                                        for (gv, xv) in grow.iter().zip(&row[kx..kx + grow.len()]) {
                                            acc += *gv * *xv;
                                        }
                                    } else {
                                        for (ox, gv) in grow.iter().enumerate() {
                                            acc += *gv * row[ox * d.stride + kx];
                                        }
                                    }
                                }
                            }
                            dk[k_base + ky * d.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference convolution, independent of the production path.
    fn conv_reference(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.out_ch * d.out_h * d.out_w];
        for n in 0..d.batch {
            for f in 0..d.out_ch {
                for oy in 0..d.out_h {
                    for ox in 0..d.out_w {
                        let mut acc = 0.0;
                        for c in 0..d.in_ch {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= d.in_h as isize || ix >= d.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * d.in_ch + c) * d.in_h + iy as usize) * d.in_w
                                        + ix as usize;
                                    let ki = ((f * d.in_ch + c) * d.kh + ky) * d.kw + kx;
                                    acc += x[xi] * k[ki];
                                }
                            }
                        }
                        out[((n * d.out_ch + f) * d.out_h + oy) * d.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn dims(batch: usize, in_ch: usize, in_h: usize, in_w: usize, out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> ConvDims {
        ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: conv_out_size(in_h, kh, stride, pad).unwrap(),
            out_w: conv_out_size(in_w, kw, stride, pad).unwrap(),
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let d = dims(1, 1, 3, 3, 1, 3, 3, 1, 0);
        let out = conv2d_fwd(&vec![1.0f64; 9], &vec![1.0f64; 9], &d);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // One kernel per channel pair: center 1 only when f == c.
        let mut k = vec![0.0f64; 3 * 3 * 3 * 3];
        for f in 0..3 {
            k[((f * 3 + f) * 3 + 1) * 3 + 1] = 1.0;
        }
        let d = dims(2, 3, 5, 5, 3, 3, 3, 1, 1);
        let out = conv2d_fwd(&x, &k, &d);
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_reference_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let d = dims(2, 3, 8, 8, 4, if stride == 2 { 4 } else { 3 }, if stride == 2 { 4 } else { 3 }, stride, pad);
            let x: Vec<f64> = (0..d.batch * d.in_ch * d.in_h * d.in_w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let k: Vec<f64> = (0..d.out_ch * d.in_ch * d.kh * d.kw)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let got = conv2d_fwd(&x, &k, &d);
            let want = conv_reference(&x, &k, &d);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "stride={stride} pad={pad}: {a} vs {b}");
            }
        }
    }

    /// <conv(a,k), b> == <a, conv_transpose(b,k)> over random shapes.
    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..5 {
            let stride = 1 + case % 2;
            let ksz = if stride == 2 { 4 } else { 3 };
            let pad = case % 2;
            let d = dims(1 + case % 2, 2, 8, 8, 3, ksz, ksz, stride, pad);
            let a: Vec<f64> = (0..d.batch * d.in_ch * d.in_h * d.in_w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let k: Vec<f64> = (0..d.out_ch * d.in_ch * d.kh * d.kw)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..d.batch * d.out_ch * d.out_h * d.out_w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let conv_a = conv2d_fwd(&a, &k, &d);
            let convt_b = conv2d_bwd_input(&b, &k, &d);
            let lhs: f64 = conv_a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.iter().zip(&convt_b).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-10, "case {case}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn out_size_rules() {
        assert_eq!(conv_out_size(32, 4, 2, 1), Some(16));
        assert_eq!(conv_out_size(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_size(32, 3, 2, 1), None); // inexact
        assert_eq!(conv_out_size(2, 5, 1, 0), None); // kernel larger than input
        assert_eq!(conv_transpose_out_size(16, 4, 2, 1), Some(32));
    }
}

//! Plane-level image helpers: bilinear resize and its adjoint, used both by
//! the autodiff graph and by the crop/scatter paths that never touch a tape.

use crate::scalar::Scalar;

/// Sample positions use half-pixel centers; resizing to the same size is the
/// identity.
#[inline]
pub fn sample_coords(len_in: usize, len_out: usize, idx: usize) -> (usize, usize, f64) {
    if len_in == len_out {
        return (idx, idx, 0.0);
    }
    let scale = len_in as f64 / len_out as f64;
    let s = ((idx as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(len_in - 1);
    (lo, hi, s - lo as f64)
}

pub fn resize_bilinear<S: Scalar>(
    src: &[S],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dst: &mut [S],
) {
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(dst.len(), out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, wy) = sample_coords(h, out_h, oy);
        let wy = S::from_f64(wy);
        for ox in 0..out_w {
            let (x0, x1, wx) = sample_coords(w, out_w, ox);
            let wx = S::from_f64(wx);
            let a = src[y0 * w + x0];
            let b = src[y0 * w + x1];
            let c = src[y1 * w + x0];
            let d = src[y1 * w + x1];
            let top = a + (b - a) * wx;
            let bot = c + (d - c) * wx;
            dst[oy * out_w + ox] = top + (bot - top) * wy;
        }
    }
}

/// Transpose of `resize_bilinear`: scatter-add each output gradient back to
/// the four source taps with the same weights.
pub fn resize_bilinear_adjoint<S: Scalar>(
    g: &[S],
    g_h: usize,
    g_w: usize,
    h: usize,
    w: usize,
    dst: &mut [S],
) {
    debug_assert_eq!(g.len(), g_h * g_w);
    debug_assert_eq!(dst.len(), h * w);
    for oy in 0..g_h {
        let (y0, y1, wy) = sample_coords(h, g_h, oy);
        let wy = S::from_f64(wy);
        for ox in 0..g_w {
            let (x0, x1, wx) = sample_coords(w, g_w, ox);
            let wx = S::from_f64(wx);
            let gv = g[oy * g_w + ox];
            let one = S::ONE;
            dst[y0 * w + x0] += gv * (one - wy) * (one - wx);
            dst[y0 * w + x1] += gv * (one - wy) * wx;
            dst[y1 * w + x0] += gv * wy * (one - wx);
            dst[y1 * w + x1] += gv * wy * wx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut dst = vec![0.0; 12];
        resize_bilinear(&src, 3, 4, 3, 4, &mut dst);
        assert_eq!(src, dst);
    }

    #[test]
    fn downscale_averages() {
        // 2x2 blocks of a constant image stay constant.
        let src = vec![5.0f64; 8 * 8];
        let mut dst = vec![0.0; 16];
        resize_bilinear(&src, 8, 8, 4, 4, &mut dst);
        for v in dst {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_inner_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (h, w, oh, ow) = (7, 5, 11, 13);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rx = vec![0.0; oh * ow];
        resize_bilinear(&x, h, w, oh, ow, &mut rx);
        let mut ry = vec![0.0; h * w];
        resize_bilinear_adjoint(&y, oh, ow, h, w, &mut ry);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ry).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

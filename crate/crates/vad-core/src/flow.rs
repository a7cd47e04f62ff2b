//! Dense optical flow via a pyramidal Horn-Schunck scheme: brightness
//! constancy plus quadratic smoothness, fixed-point iterations per level,
//! coarse-to-fine with one warp per level. Identical frames produce exactly
//! zero flow.

use crate::error::{Result, TensorError, VadError};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub iterations: usize,
    /// Weight of the smoothness term (plays the alpha^2 role in the
    /// fixed-point update denominator).
    pub smoothness: f64,
    pub max_displacement: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            iterations: 100,
            smoothness: 0.1,
            max_displacement: 8.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
        }
    }
}

pub fn flow_magnitude_map(flow: &FlowField) -> Vec<f32> {
    flow.u
        .iter()
        .zip(&flow.v)
        .map(|(u, v)| (u * u + v * v).sqrt())
        .collect()
}

/// Fixed luma weights for the internal grayscale conversion.
pub fn to_gray(rgb_chw: &[f32], h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    (0..plane)
        .map(|i| 0.299 * rgb_chw[i] + 0.587 * rgb_chw[plane + i] + 0.114 * rgb_chw[2 * plane + i])
        .collect()
}

fn downsample(src: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (y0, x0) = (2 * y, 2 * x);
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            out[y * ow + x] =
                0.25 * (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1]);
        }
    }
    (out, oh, ow)
}

#[inline]
fn sample_clamped(img: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let xc = x.clamp(0.0, (w - 1) as f32);
    let yc = y.clamp(0.0, (h - 1) as f32);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = xc - x0 as f32;
    let ty = yc - y0 as f32;
    let top = img[y0 * w + x0] * (1.0 - tx) + img[y0 * w + x1] * tx;
    let bot = img[y1 * w + x0] * (1.0 - tx) + img[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

#[inline]
fn at(img: &[f32], w: usize, x: usize, y: usize) -> f32 {
    img[y * w + x]
}

/// Symmetric central differences with replicated borders, averaged over both
/// frames; It is the warped temporal difference.
fn derivatives(
    i0: &[f32],
    i1w: &[f32],
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut ix = vec![0.0f32; h * w];
    let mut iy = vec![0.0f32; h * w];
    let mut it = vec![0.0f32; h * w];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let gx0 = 0.5 * (at(i0, w, xp, y) - at(i0, w, xm, y));
            let gx1 = 0.5 * (at(i1w, w, xp, y) - at(i1w, w, xm, y));
            let gy0 = 0.5 * (at(i0, w, x, yp) - at(i0, w, x, ym));
            let gy1 = 0.5 * (at(i1w, w, x, yp) - at(i1w, w, x, ym));
            let i = y * w + x;
            ix[i] = 0.5 * (gx0 + gx1);
            iy[i] = 0.5 * (gy0 + gy1);
            it[i] = i1w[i] - i0[i];
        }
    }
    (ix, iy, it)
}

fn neighbor_average(f: &[f32], h: usize, w: usize, out: &mut [f32]) {
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            out[y * w + x] =
                0.25 * (at(f, w, xm, y) + at(f, w, xp, y) + at(f, w, x, ym) + at(f, w, x, yp));
        }
    }
}

fn hs_level(
    i0: &[f32],
    i1: &[f32],
    h: usize,
    w: usize,
    u: &mut Vec<f32>,
    v: &mut Vec<f32>,
    params: &FlowParams,
) {
    // Warp frame t+1 toward frame t by the current estimate, once per level.
    let mut i1w = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            i1w[i] = sample_clamped(i1, h, w, x as f32 + u[i], y as f32 + v[i]);
        }
    }
    let (ix, iy, it) = derivatives(i0, &i1w, h, w);
    let alpha = params.smoothness as f32;

    let mut du = vec![0.0f32; h * w];
    let mut dv = vec![0.0f32; h * w];
    let mut du_bar = vec![0.0f32; h * w];
    let mut dv_bar = vec![0.0f32; h * w];
    for _ in 0..params.iterations {
        neighbor_average(&du, h, w, &mut du_bar);
        neighbor_average(&dv, h, w, &mut dv_bar);
        for i in 0..h * w {
            let denom = alpha + ix[i] * ix[i] + iy[i] * iy[i];
            let t = (ix[i] * du_bar[i] + iy[i] * dv_bar[i] + it[i]) / denom;
            du[i] = du_bar[i] - ix[i] * t;
            dv[i] = dv_bar[i] - iy[i] * t;
        }
    }
    for i in 0..h * w {
        u[i] += du[i];
        v[i] += dv[i];
    }
}

fn upsample_flow(f: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow];
    crate::image::resize_bilinear(f, h, w, oh, ow, &mut out);
    for v in out.iter_mut() {
        *v *= 2.0;
    }
    out
}

/// Estimate dense flow from `frame_t` to `frame_t1` (both CHW RGB in [0,1]).
pub fn estimate_flow(
    frame_t: &[f32],
    frame_t1: &[f32],
    h: usize,
    w: usize,
    params: &FlowParams,
) -> Result<FlowField> {
    if frame_t.len() != 3 * h * w || frame_t1.len() != 3 * h * w {
        return Err(VadError::Tensor(TensorError::ShapeMismatch {
            op: "estimate_flow",
            expected: vec![3, h, w],
            got: vec![frame_t.len() / (h * w).max(1), h, w],
        }));
    }
    let g0 = to_gray(frame_t, h, w);
    let g1 = to_gray(frame_t1, h, w);

    // Pyramid, finest first.
    let mut pyr0 = vec![(g0, h, w)];
    let mut pyr1 = vec![(g1, h, w)];
    for _ in 1..params.pyramid_levels.max(1) {
        let (p0, ph, pw) = {
            let last = pyr0.last().unwrap();
            downsample(&last.0, last.1, last.2)
        };
        let (p1, _, _) = {
            let last = pyr1.last().unwrap();
            downsample(&last.0, last.1, last.2)
        };
        if ph < 8 || pw < 8 {
            break;
        }
        pyr0.push((p0, ph, pw));
        pyr1.push((p1, ph, pw));
    }

    let coarsest = pyr0.len() - 1;
    let mut u = vec![0.0f32; pyr0[coarsest].1 * pyr0[coarsest].2];
    let mut v = vec![0.0f32; pyr0[coarsest].1 * pyr0[coarsest].2];
    for level in (0..=coarsest).rev() {
        let (ref i0, lh, lw) = pyr0[level];
        let (ref i1, _, _) = pyr1[level];
        if level != coarsest {
            u = upsample_flow(&u, pyr0[level + 1].1, pyr0[level + 1].2, lh, lw);
            v = upsample_flow(&v, pyr0[level + 1].1, pyr0[level + 1].2, lh, lw);
        }
        hs_level(i0, i1, lh, lw, &mut u, &mut v, params);
    }

    let cap = params.max_displacement;
    for x in u.iter_mut().chain(v.iter_mut()) {
        *x = x.clamp(-cap, cap);
        if !x.is_finite() {
            return Err(VadError::Divergence("non-finite flow value".into()));
        }
    }
    Ok(FlowField { h, w, u, v })
}

/// Flow for every consecutive pair of a [T,3,H,W] stack -> [T-1,2,H,W].
/// Pairs are independent and run in parallel; results are written by index.
pub fn flow_stack(frames: &Tensor<f32>, params: &FlowParams) -> Result<Tensor<f32>> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(VadError::Tensor(TensorError::ShapeMismatch {
            op: "flow_stack",
            expected: vec![0, 3, 0, 0],
            got: shape.to_vec(),
        }));
    }
    let (t_total, h, w) = (shape[0], shape[2], shape[3]);
    if t_total < 2 {
        return Err(VadError::Config("flow_stack needs at least 2 frames".into()));
    }
    let frame_len = 3 * h * w;
    let fields: Vec<Result<FlowField>> = (0..t_total - 1)
        .into_par_iter()
        .map(|t| {
            estimate_flow(
                &frames.data()[t * frame_len..(t + 1) * frame_len],
                &frames.data()[(t + 1) * frame_len..(t + 2) * frame_len],
                h,
                w,
                params,
            )
        })
        .collect();
    let mut out = vec![0.0f32; (t_total - 1) * 2 * h * w];
    for (t, field) in fields.into_iter().enumerate() {
        let field = field?;
        let base = t * 2 * h * w;
        out[base..base + h * w].copy_from_slice(&field.u);
        out[base + h * w..base + 2 * h * w].copy_from_slice(&field.v);
    }
    Tensor::from_vec(vec![t_total - 1, 2, h, w], out).map_err(VadError::Tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth random texture with gradients everywhere.
    fn texture(h: usize, w: usize, shift_x: usize, shift_y: usize) -> Vec<f32> {
        let mut rgb = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                // Two octaves of deterministic lattice noise.
                let xs = (x + shift_x) as f64;
                let ys = (y + shift_y) as f64;
                let v = 0.5
                    + 0.3 * ((xs * 0.35).sin() * (ys * 0.22).cos())
                    + 0.2 * ((xs * 0.11 + 1.3).cos() * (ys * 0.4 + 0.7).sin());
                for c in 0..3 {
                    rgb[c * h * w + y * w + x] = v as f32 * (1.0 - 0.1 * c as f32);
                }
            }
        }
        rgb
    }

    fn interior_means(field: &FlowField, margin: usize) -> (f32, f32) {
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0;
        for y in margin..field.h - margin {
            for x in margin..field.w - margin {
                su += field.u[y * field.w + x];
                sv += field.v[y * field.w + x];
                n += 1;
            }
        }
        (su / n as f32, sv / n as f32)
    }

    #[test]
    fn identical_frames_give_exactly_zero_flow() {
        let img = texture(48, 48, 0, 0);
        let field = estimate_flow(&img, &img, 48, 48, &FlowParams::default()).unwrap();
        assert!(field.u.iter().all(|&v| v == 0.0));
        assert!(field.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_pixel_translation_is_recovered() {
        let (h, w) = (64, 64);
        let f0 = texture(h, w, 1, 0);
        let f1 = texture(h, w, 0, 0); // content moved +1 px in x
        let field = estimate_flow(&f0, &f1, h, w, &FlowParams::default()).unwrap();
        let (mu, mv) = interior_means(&field, 8);
        assert!((0.8..=1.2).contains(&mu), "mean u = {mu}");
        assert!(mv.abs() <= 0.2, "mean v = {mv}");
    }

    #[test]
    fn two_pixel_translation_with_two_level_pyramid() {
        let (h, w) = (64, 64);
        let f0 = texture(h, w, 2, 0);
        let f1 = texture(h, w, 0, 0);
        let params = FlowParams {
            pyramid_levels: 2,
            ..FlowParams::default()
        };
        let field = estimate_flow(&f0, &f1, h, w, &params).unwrap();
        let (mu, _) = interior_means(&field, 8);
        assert!((1.6..=2.4).contains(&mu), "mean u = {mu}");
    }

    #[test]
    fn magnitude_map_examples() {
        let zero = FlowField::zeros(4, 4);
        assert!(flow_magnitude_map(&zero).iter().all(|&m| m == 0.0));

        let field = FlowField {
            h: 2,
            w: 2,
            u: vec![3.0; 4],
            v: vec![4.0; 4],
        };
        assert!(flow_magnitude_map(&field).iter().all(|&m| (m - 5.0).abs() < 1e-6));

        let rand_field = FlowField {
            h: 1,
            w: 3,
            u: vec![0.5, -1.0, 2.0],
            v: vec![1.5, 0.0, -2.0],
        };
        for (i, m) in flow_magnitude_map(&rand_field).iter().enumerate() {
            let want = (rand_field.u[i].powi(2) + rand_field.v[i].powi(2)).sqrt();
            assert!((m - want).abs() < 1e-6);
        }
    }

    /// Horizontally mirrored inputs give mirrored flow with u negated.
    #[test]
    fn mirror_covariance() {
        let (h, w) = (48, 64);
        let f0 = texture(h, w, 1, 1);
        let f1 = texture(h, w, 0, 0);
        let mirror = |img: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0f32; img.len()];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out[c * h * w + y * w + x] = img[c * h * w + y * w + (w - 1 - x)];
                    }
                }
            }
            out
        };
        let params = FlowParams {
            iterations: 60,
            ..FlowParams::default()
        };
        let fwd = estimate_flow(&f0, &f1, h, w, &params).unwrap();
        let mir = estimate_flow(&mirror(&f0), &mirror(&f1), h, w, &params).unwrap();
        let mut worst = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                let a = fwd.u[y * w + x];
                let b = -mir.u[y * w + (w - 1 - x)];
                worst = worst.max((a - b).abs());
                let av = fwd.v[y * w + x];
                let bv = mir.v[y * w + (w - 1 - x)];
                worst = worst.max((av - bv).abs());
            }
        }
        assert!(worst <= 1e-3, "mirror asymmetry {worst}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = vec![0.0f32; 3 * 8 * 8];
        let b = vec![0.0f32; 3 * 8 * 4];
        assert!(estimate_flow(&a, &b, 8, 8, &FlowParams::default()).is_err());
    }
}

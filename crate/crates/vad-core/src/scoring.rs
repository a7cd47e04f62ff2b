//! Anomaly scoring: per-cube reconstruction and prediction errors fused into
//! a standardized frame-wise score, and per-pixel robust-scaled error fields
//! scattered into bounding boxes. Calibration statistics come from normal
//! training data only.

use crate::cvae::{self, CvaeHyper, CvaeParams, LatentMode};
use crate::error::{Result, VadError};
use crate::memae::{self, MemAeHyper, MemAeParams};
use crate::scalar::Scalar;
use crate::stc::{scatter_patch, AnomalyMap, STCube, CUBE_SIZE};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const EPS_FLOOR: f64 = 1e-8;
const PATCH_AREA: usize = CUBE_SIZE * CUBE_SIZE;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    /// Frame-wise flow-reconstruction weight.
    pub w_r: f64,
    /// Frame-wise prediction weight.
    pub w_p: f64,
    /// Pixel-wise flow-reconstruction weight.
    pub w_rp: f64,
    /// Pixel-wise prediction weight.
    pub w_pp: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w_r: 10.0,
            w_p: 0.1,
            w_rp: 10.0,
            w_pp: 0.1,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_r < 0.0 || self.w_p < 0.0 || self.w_rp < 0.0 || self.w_pp < 0.0 {
            return Err(VadError::Config("score weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Calibration statistics over normal data: mean/std of the per-cube scores
/// and pooled per-channel median/IQR of the per-pixel squared errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStats {
    pub mu_r: f64,
    pub sigma_r: f64,
    pub mu_p: f64,
    pub sigma_p: f64,
    /// Per flow component (u, v).
    pub median_r: Vec<f64>,
    pub iqr_r: Vec<f64>,
    /// Per image channel (R, G, B).
    pub median_p: Vec<f64>,
    pub iqr_p: Vec<f64>,
    pub cube_count: usize,
}

/// Unreduced error fields of one cube: scalar means plus the per-pixel
/// squared-error patches (flow errors pooled over the window per component).
#[derive(Clone, Debug)]
pub struct CubeErrors {
    pub s_r: f64,
    pub s_p: f64,
    /// [2, 32, 32] flattened.
    pub e_r: Vec<f64>,
    /// [3, 32, 32] flattened.
    pub e_p: Vec<f64>,
}

/// Pure error computation from tensors (the model-free half of cube scoring).
pub fn error_fields<S: Scalar>(
    flow: &Tensor<S>,
    flow_recon: &Tensor<S>,
    target: &Tensor<S>,
    pred: &Tensor<S>,
) -> Result<CubeErrors> {
    if flow.shape() != flow_recon.shape() || target.shape() != pred.shape() {
        return Err(VadError::Config("error_fields shape mismatch".into()));
    }
    let flow_ch = flow.numel() / PATCH_AREA; // (t_len-1) * 2
    let windows = flow_ch / 2;
    let mut e_r = vec![0.0f64; 2 * PATCH_AREA];
    let mut s_r = 0.0f64;
    for win in 0..windows {
        for comp in 0..2 {
            let base = (win * 2 + comp) * PATCH_AREA;
            for p in 0..PATCH_AREA {
                let d = (flow.data()[base + p] - flow_recon.data()[base + p]).to_f64();
                let sq = d * d;
                e_r[comp * PATCH_AREA + p] += sq / windows as f64;
                s_r += sq;
            }
        }
    }
    s_r /= flow.numel() as f64;

    let img_ch = target.numel() / PATCH_AREA;
    let mut e_p = vec![0.0f64; img_ch * PATCH_AREA];
    let mut s_p = 0.0f64;
    for i in 0..target.numel() {
        let d = (target.data()[i] - pred.data()[i]).to_f64();
        e_p[i] = d * d;
        s_p += d * d;
    }
    s_p /= target.numel() as f64;

    Ok(CubeErrors { s_r, s_p, e_r, e_p })
}

/// Run both models on a batch of cubes and return per-cube error fields.
/// Reconstruction uses the flow model; prediction is deterministic
/// prior-mean conditioning on the reconstructed flow.
pub fn cube_errors_batch<S: Scalar>(
    cubes: &[&STCube],
    memae_params: &MemAeParams<S>,
    cvae_params: &CvaeParams<S>,
    memae_hyper: &MemAeHyper,
    cvae_hyper: &CvaeHyper,
) -> Result<Vec<CubeErrors>> {
    if cubes.is_empty() {
        return Ok(Vec::new());
    }
    let flows: Vec<Tensor<S>> = cubes
        .iter()
        .map(|c| {
            let t = Tensor::<S>::from_f32_tensor(&c.flow_window);
            t.reshaped(vec![memae_hyper.in_channels, CUBE_SIZE, CUBE_SIZE])
                .map_err(VadError::Tensor)
        })
        .collect::<Result<_>>()?;
    let conds: Vec<Tensor<S>> = cubes
        .iter()
        .map(|c| {
            let t = Tensor::<S>::from_f32_tensor(&c.img_window);
            t.reshaped(vec![cvae_hyper.cond_channels, CUBE_SIZE, CUBE_SIZE])
                .map_err(VadError::Tensor)
        })
        .collect::<Result<_>>()?;
    let flow_batch = memae::stack_batch(&flows.iter().collect::<Vec<_>>())?;
    let cond_batch = memae::stack_batch(&conds.iter().collect::<Vec<_>>())?;
    let recon = memae::reconstruct(memae_params, &flow_batch, memae_hyper)?;
    let pred = cvae::predict(
        cvae_params,
        &cond_batch,
        &recon,
        LatentMode::PriorMean,
        cvae_hyper,
    )?;

    let flow_len = memae_hyper.in_channels * PATCH_AREA;
    let img_len = 3 * PATCH_AREA;
    cubes
        .iter()
        .enumerate()
        .map(|(i, cube)| {
            let flow_i = Tensor::from_vec(
                vec![flow_len],
                flow_batch.data()[i * flow_len..(i + 1) * flow_len].to_vec(),
            )
            .map_err(VadError::Tensor)?;
            let recon_i = Tensor::from_vec(
                vec![flow_len],
                recon.data()[i * flow_len..(i + 1) * flow_len].to_vec(),
            )
            .map_err(VadError::Tensor)?;
            let target_i = Tensor::<S>::from_f32_tensor(&cube.target_img)
                .reshaped(vec![img_len])
                .map_err(VadError::Tensor)?;
            let pred_i = Tensor::from_vec(
                vec![img_len],
                pred.data()[i * img_len..(i + 1) * img_len].to_vec(),
            )
            .map_err(VadError::Tensor)?;
            error_fields(&flow_i, &recon_i, &target_i, &pred_i)
        })
        .collect()
}

/// Quantile with linear interpolation between order statistics; `sorted`
/// must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Estimate calibration statistics from cube errors on normal data.
pub fn calibrate(errors: &[CubeErrors]) -> Result<TrainStats> {
    if errors.is_empty() {
        return Err(VadError::Config("calibration requires at least one cube".into()));
    }
    let n = errors.len() as f64;
    let mu_r = errors.iter().map(|e| e.s_r).sum::<f64>() / n;
    let mu_p = errors.iter().map(|e| e.s_p).sum::<f64>() / n;
    let sigma_r = (errors.iter().map(|e| (e.s_r - mu_r).powi(2)).sum::<f64>() / n).sqrt();
    let sigma_p = (errors.iter().map(|e| (e.s_p - mu_p).powi(2)).sum::<f64>() / n).sqrt();

    let channel_stats = |num_ch: usize, field: &dyn Fn(&CubeErrors) -> &Vec<f64>| {
        let mut medians = Vec::with_capacity(num_ch);
        let mut iqrs = Vec::with_capacity(num_ch);
        for c in 0..num_ch {
            let mut pool: Vec<f64> = errors
                .iter()
                .flat_map(|e| field(e)[c * PATCH_AREA..(c + 1) * PATCH_AREA].iter().copied())
                .collect();
            pool.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            medians.push(quantile(&pool, 0.5));
            iqrs.push(quantile(&pool, 0.75) - quantile(&pool, 0.25));
        }
        (medians, iqrs)
    };
    let (median_r, iqr_r) = channel_stats(2, &|e| &e.e_r);
    let (median_p, iqr_p) = channel_stats(3, &|e| &e.e_p);

    Ok(TrainStats {
        mu_r,
        sigma_r,
        mu_p,
        sigma_p,
        median_r,
        iqr_r,
        median_p,
        iqr_p,
        cube_count: errors.len(),
    })
}

pub fn robust_scale(x: f64, median: f64, iqr: f64) -> f64 {
    (x - median) / iqr.max(EPS_FLOOR)
}

/// Standardized fusion of the two error sources for one cube.
pub fn cube_score(s_r: f64, s_p: f64, stats: &TrainStats, weights: &ScoreWeights) -> f64 {
    weights.w_r * (s_r - stats.mu_r) / stats.sigma_r.max(EPS_FLOOR)
        + weights.w_p * (s_p - stats.mu_p) / stats.sigma_p.max(EPS_FLOOR)
}

/// Frame score: the max over its cubes' scores; frames with no cubes score 0.
pub fn frame_score(
    cube_scores: &[(f64, f64)],
    stats: &TrainStats,
    weights: &ScoreWeights,
) -> (f64, Vec<f64>) {
    let per_cube: Vec<f64> = cube_scores
        .iter()
        .map(|&(s_r, s_p)| cube_score(s_r, s_p, stats, weights))
        .collect();
    let frame = per_cube.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (
        if per_cube.is_empty() { 0.0 } else { frame },
        per_cube,
    )
}

/// Per-pixel score patch: robust-scale each channel, aggregate per source by
/// the channel mean, combine with the pixel weights, clamp at zero (the map
/// is a heatmap; the signed values stay in the frame score only).
pub fn pixel_score_patch(
    e_r: &[f64],
    e_p: &[f64],
    stats: &TrainStats,
    weights: &ScoreWeights,
) -> Vec<f64> {
    let mut patch = vec![0.0f64; PATCH_AREA];
    for p in 0..PATCH_AREA {
        let mut m_r = 0.0;
        for c in 0..2 {
            m_r += robust_scale(e_r[c * PATCH_AREA + p], stats.median_r[c], stats.iqr_r[c]);
        }
        m_r /= 2.0;
        let mut m_p = 0.0;
        for c in 0..3 {
            m_p += robust_scale(e_p[c * PATCH_AREA + p], stats.median_p[c], stats.iqr_p[c]);
        }
        m_p /= 3.0;
        patch[p] = (weights.w_rp * m_r + weights.w_pp * m_p).max(0.0);
    }
    patch
}

/// Scatter per-cube patches into a zeroed map and attach the frame score.
pub fn frame_pixel_map(
    h: usize,
    w: usize,
    entries: &[(crate::scenegen::BBox, Vec<f64>)],
    frame_score: f64,
) -> AnomalyMap {
    let mut map = AnomalyMap::zeros(h, w);
    for (bbox, patch) in entries {
        let patch32: Vec<f32> = patch.iter().map(|&v| v as f32).collect();
        scatter_patch(&mut map, bbox, &patch32);
    }
    map.frame_score = frame_score;
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mk(shape: Vec<usize>, v: f32) -> Tensor<f32> {
        Tensor::full(&shape, v)
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let flow = mk(vec![6, 32, 32], 0.3);
        let img = mk(vec![3, 32, 32], 0.6);
        let e = error_fields(&flow, &flow, &img, &img).unwrap();
        assert_eq!(e.s_r, 0.0);
        assert_eq!(e.s_p, 0.0);
        assert!(e.e_r.iter().all(|&v| v == 0.0));
        assert!(e.e_p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset_gives_c_squared() {
        let flow = mk(vec![6, 32, 32], 0.2);
        let recon = mk(vec![6, 32, 32], 0.2 + 0.5);
        let img = mk(vec![3, 32, 32], 0.1);
        let e = error_fields(&flow, &recon, &img, &img).unwrap();
        assert!((e.s_r - 0.25).abs() < 1e-6);
        assert!(e.e_r.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    /// Independent straight-loop MSE oracle on a random case.
    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let flow = Tensor::<f32>::rand_uniform(&[6, 32, 32], 1.0, &mut rng);
        let recon = Tensor::<f32>::rand_uniform(&[6, 32, 32], 1.0, &mut rng);
        let img = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.5, &mut rng);
        let pred = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.5, &mut rng);
        let e = error_fields(&flow, &recon, &img, &pred).unwrap();

        let mut want_sr = 0.0f64;
        for i in 0..flow.numel() {
            want_sr += ((flow.data()[i] - recon.data()[i]) as f64).powi(2);
        }
        want_sr /= flow.numel() as f64;
        assert!((e.s_r - want_sr).abs() < 1e-6);

        let mut want_sp = 0.0f64;
        for i in 0..img.numel() {
            want_sp += ((img.data()[i] - pred.data()[i]) as f64).powi(2);
        }
        want_sp /= img.numel() as f64;
        assert!((e.s_p - want_sp).abs() < 1e-6);

        // Pooled flow field: mean over the 3 windows per component and pixel.
        for comp in 0..2 {
            for p in 0..PATCH_AREA {
                let mut want = 0.0f64;
                for win in 0..3 {
                    let idx = (win * 2 + comp) * PATCH_AREA + p;
                    want += ((flow.data()[idx] - recon.data()[idx]) as f64).powi(2);
                }
                want /= 3.0;
                assert!((e.e_r[comp * PATCH_AREA + p] - want).abs() < 1e-6);
            }
        }
    }

    fn const_errors(s_r: f64, s_p: f64) -> CubeErrors {
        CubeErrors {
            s_r,
            s_p,
            e_r: vec![s_r; 2 * PATCH_AREA],
            e_p: vec![s_p; 3 * PATCH_AREA],
        }
    }

    #[test]
    fn calibration_degenerate_constant() {
        let errors: Vec<CubeErrors> = (0..5).map(|_| const_errors(0.7, 0.2)).collect();
        let stats = calibrate(&errors).unwrap();
        assert!((stats.mu_r - 0.7).abs() < 1e-12);
        assert_eq!(stats.sigma_r, 0.0);
        // Sigma floors at use: the score stays finite.
        let (score, _) = frame_score(&[(0.8, 0.2)], &stats, &ScoreWeights::default());
        assert!(score.is_finite());
        assert!((stats.median_r[0] - 0.7).abs() < 1e-12);
        assert_eq!(stats.iqr_r[0], 0.0);
        assert!(robust_scale(1.0, stats.median_r[0], stats.iqr_r[0]).is_finite());
    }

    /// Sorting-based percentile oracle: [1,2,3,4,5] -> median 3, Q25 2, Q75 4.
    #[test]
    fn quantiles_match_sort_oracle() {
        let pool = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&pool, 0.5), 3.0);
        assert_eq!(quantile(&pool, 0.25), 2.0);
        assert_eq!(quantile(&pool, 0.75), 4.0);
        assert_eq!(quantile(&pool, 0.75) - quantile(&pool, 0.25), 2.0);
    }

    #[test]
    fn calibration_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut errors: Vec<CubeErrors> = (0..8)
            .map(|_| {
                let mut e = const_errors(0.0, 0.0);
                e.s_r = rng.gen_range(0.0..1.0);
                e.s_p = rng.gen_range(0.0..1.0);
                for v in e.e_r.iter_mut().chain(e.e_p.iter_mut()) {
                    *v = rng.gen_range(0.0..1.0);
                }
                e
            })
            .collect();
        let a = calibrate(&errors).unwrap();
        errors.reverse();
        errors.swap(1, 5);
        let b = calibrate(&errors).unwrap();
        assert_eq!(a.median_r, b.median_r);
        assert_eq!(a.iqr_p, b.iqr_p);
        assert!((a.mu_r - b.mu_r).abs() < 1e-12);
    }

    fn plain_stats() -> TrainStats {
        TrainStats {
            mu_r: 0.4,
            sigma_r: 0.2,
            mu_p: 0.1,
            sigma_p: 0.05,
            median_r: vec![0.3, 0.35],
            iqr_r: vec![0.1, 0.12],
            median_p: vec![0.05, 0.06, 0.07],
            iqr_p: vec![0.02, 0.025, 0.03],
            cube_count: 10,
        }
    }

    #[test]
    fn frame_score_examples() {
        let stats = plain_stats();
        // S_r at the calibration mean scores zero with w = (1, 0).
        let w10 = ScoreWeights { w_r: 1.0, w_p: 0.0, w_rp: 1.0, w_pp: 0.0 };
        let (s, _) = frame_score(&[(stats.mu_r, 0.9)], &stats, &w10);
        assert_eq!(s, 0.0);

        // One sigma above the mean with w_r = 10 scores exactly 10.
        let w = ScoreWeights::default();
        let (s, _) = frame_score(&[(stats.mu_r + stats.sigma_r, stats.mu_p)], &stats, &w);
        assert!((s - 10.0).abs() < 1e-12);

        // Frame takes the max over cubes.
        let cubes = [
            (stats.mu_r + 0.1 * stats.sigma_r, stats.mu_p),
            (stats.mu_r + 0.25 * stats.sigma_r, stats.mu_p),
            (stats.mu_r - 0.03 * stats.sigma_r, stats.mu_p),
        ];
        let (s, per) = frame_score(&cubes, &stats, &w10);
        assert_eq!(s, per[1]);
        assert!((per[0] - 0.1).abs() < 1e-9 && (per[1] - 0.25).abs() < 1e-9);

        // No cubes scores zero.
        let (s, per) = frame_score(&[], &stats, &w);
        assert_eq!(s, 0.0);
        assert!(per.is_empty());
    }

    #[test]
    fn robust_scale_examples() {
        assert_eq!(robust_scale(3.0, 3.0, 2.0), 0.0);
        assert_eq!(robust_scale(5.0, 3.0, 2.0), 1.0);
        let v = robust_scale(1.0, 0.5, 0.0);
        assert!(v.is_finite());
    }

    #[test]
    fn pixel_patch_rules() {
        let stats = plain_stats();
        let w = ScoreWeights::default();
        // Errors exactly at the calibration medians produce a zero patch.
        let mut e_r = vec![0.0f64; 2 * PATCH_AREA];
        let mut e_p = vec![0.0f64; 3 * PATCH_AREA];
        for c in 0..2 {
            e_r[c * PATCH_AREA..(c + 1) * PATCH_AREA].fill(stats.median_r[c]);
        }
        for c in 0..3 {
            e_p[c * PATCH_AREA..(c + 1) * PATCH_AREA].fill(stats.median_p[c]);
        }
        let patch = pixel_score_patch(&e_r, &e_p, &stats, &w);
        assert!(patch.iter().all(|&v| v == 0.0));

        // w_pp = 0 reduces the patch to the flow term alone.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for v in e_r.iter_mut().chain(e_p.iter_mut()) {
            *v = rng.gen_range(0.0..1.0);
        }
        let w_flow_only = ScoreWeights { w_r: 10.0, w_p: 0.0, w_rp: 10.0, w_pp: 0.0 };
        let patch = pixel_score_patch(&e_r, &e_p, &stats, &w_flow_only);
        for p in 0..PATCH_AREA {
            let m_r = (robust_scale(e_r[p], stats.median_r[0], stats.iqr_r[0])
                + robust_scale(e_r[PATCH_AREA + p], stats.median_r[1], stats.iqr_r[1]))
                / 2.0;
            let want = (10.0 * m_r).max(0.0);
            assert!((patch[p] - want).abs() < 1e-10);
        }
    }

    /// Straight-line recomputation of the full pixel formula to 1e-10.
    #[test]
    fn pixel_patch_matches_straight_line_recomputation() {
        let stats = plain_stats();
        let w = ScoreWeights { w_r: 10.0, w_p: 0.1, w_rp: 7.0, w_pp: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let e_r: Vec<f64> = (0..2 * PATCH_AREA).map(|_| rng.gen_range(0.0..1.0)).collect();
        let e_p: Vec<f64> = (0..3 * PATCH_AREA).map(|_| rng.gen_range(0.0..1.0)).collect();
        let patch = pixel_score_patch(&e_r, &e_p, &stats, &w);
        for p in 0..PATCH_AREA {
            let mut m_r = 0.0;
            for c in 0..2 {
                m_r += (e_r[c * PATCH_AREA + p] - stats.median_r[c]) / stats.iqr_r[c].max(1e-8);
            }
            m_r /= 2.0;
            let mut m_p = 0.0;
            for c in 0..3 {
                m_p += (e_p[c * PATCH_AREA + p] - stats.median_p[c]) / stats.iqr_p[c].max(1e-8);
            }
            m_p /= 3.0;
            let want = (w.w_rp * m_r + w.w_pp * m_p).max(0.0);
            assert!((patch[p] - want).abs() < 1e-10);
        }
    }

    /// Scaling both weights by a > 0 scales the frame score by a and leaves
    /// the argmax cube unchanged; raising any single cube's S_r never lowers
    /// the frame score.
    #[test]
    fn linearity_and_monotonicity() {
        let stats = plain_stats();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..20 {
            let cubes: Vec<(f64, f64)> = (0..5)
                .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5)))
                .collect();
            let w = ScoreWeights { w_r: 3.0, w_p: 0.5, w_rp: 1.0, w_pp: 1.0 };
            let a = rng.gen_range(0.1..4.0);
            let wa = ScoreWeights { w_r: a * w.w_r, w_p: a * w.w_p, ..w };
            let (s, per) = frame_score(&cubes, &stats, &w);
            let (sa, per_a) = frame_score(&cubes, &stats, &wa);
            assert!((sa - a * s).abs() < 1e-9);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&per), argmax(&per_a));

            let mut bumped = cubes.clone();
            let k = rng.gen_range(0..bumped.len());
            bumped[k].0 += rng.gen_range(0.0..1.0);
            let (sb, _) = frame_score(&bumped, &stats, &w);
            assert!(sb >= s - 1e-12);
        }
    }
}

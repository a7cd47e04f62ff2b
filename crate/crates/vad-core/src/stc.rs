//! Object-centric spatiotemporal cubes and the detector degradation stub.
//!
//! Cubes stack per-track 32x32 crops of frames and flows over a temporal
//! window; flow components are rescaled by the crop-to-32 factors so
//! displacements stay consistent in resized coordinates. The stub degrades
//! ground-truth boxes (misses, jitter, size bias) to stand in for a real
//! detector, and a greedy max-IoU tracker re-associates detections.

use crate::error::{Result, VadError};
use crate::image::resize_bilinear;
use crate::scenegen::{BBox, Provenance};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const CUBE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorStub {
    /// Probability of dropping a box outright.
    pub miss_rate: f64,
    /// Gaussian corner jitter in pixels.
    pub jitter_sigma: f64,
    /// Multiplicative size bias applied about the box center.
    pub size_bias: f64,
    /// Extra miss probability for boxes below `small_area_threshold`.
    pub distance_miss_boost: f64,
    /// Area in px^2 under which a box counts as distant.
    pub small_area_threshold: i64,
    pub seed: u64,
}

impl DetectorStub {
    pub fn identity(seed: u64) -> Self {
        DetectorStub {
            miss_rate: 0.0,
            jitter_sigma: 0.0,
            size_bias: 1.0,
            distance_miss_boost: 0.0,
            small_area_threshold: 100,
            seed,
        }
    }
}

fn mix(seed: u64, frame: u64, track: u64) -> u64 {
    let mut x = seed ^ frame.wrapping_mul(0x9E3779B97F4A7C15) ^ track.wrapping_mul(0xD1B54A32D192ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Degrade ground-truth boxes into "detections", deterministically per
/// (seed, frame, track).
pub fn detect_boxes(
    gt_boxes: &[BBox],
    frame_index: usize,
    frame_w: usize,
    frame_h: usize,
    stub: &DetectorStub,
) -> Vec<BBox> {
    let mut out = Vec::with_capacity(gt_boxes.len());
    for gt in gt_boxes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(stub.seed, frame_index as u64, gt.track_id as u64));
        let mut miss = stub.miss_rate;
        if gt.area() < stub.small_area_threshold {
            miss += stub.distance_miss_boost;
        }
        if rng.gen_range(0.0..1.0) < miss.min(1.0) {
            continue;
        }
        let cx = (gt.x_min + gt.x_max) as f64 / 2.0;
        let cy = (gt.y_min + gt.y_max) as f64 / 2.0;
        let hw = gt.width() as f64 / 2.0 * stub.size_bias;
        let hh = gt.height() as f64 / 2.0 * stub.size_bias;
        let mut corners = [cx - hw, cy - hh, cx + hw, cy + hh];
        if stub.jitter_sigma > 0.0 {
            for c in corners.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c += stub.jitter_sigma * z;
            }
        }
        let candidate = BBox {
            x_min: corners[0].round() as i32,
            y_min: corners[1].round() as i32,
            x_max: corners[2].round() as i32,
            y_max: corners[3].round() as i32,
            class: gt.class,
            track_id: gt.track_id,
            provenance: Provenance::Detected,
        };
        if let Some(clipped) = candidate.clip(frame_w, frame_h) {
            out.push(clipped);
        }
    }
    out
}

/// Greedy max-IoU tracker for detected boxes: matches against the previous
/// frame one-to-one by descending IoU, unmatched detections open new tracks.
pub struct IouTracker {
    prev: Vec<BBox>,
    next_id: u32,
    iou_threshold: f64,
}

impl IouTracker {
    pub fn new(iou_threshold: f64) -> Self {
        IouTracker {
            prev: Vec::new(),
            next_id: 0,
            iou_threshold,
        }
    }

    pub fn step(&mut self, detections: &[BBox]) -> Vec<BBox> {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, p) in self.prev.iter().enumerate() {
            for (di, d) in detections.iter().enumerate() {
                let iou = p.iou(d);
                if iou >= self.iou_threshold {
                    pairs.push((iou, pi, di));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut prev_used = vec![false; self.prev.len()];
        let mut det_id: Vec<Option<u32>> = vec![None; detections.len()];
        for (_, pi, di) in pairs {
            if prev_used[pi] || det_id[di].is_some() {
                continue;
            }
            prev_used[pi] = true;
            det_id[di] = Some(self.prev[pi].track_id);
        }
        let mut out = Vec::with_capacity(detections.len());
        for (di, d) in detections.iter().enumerate() {
            let id = det_id[di].unwrap_or_else(|| {
                let id = self.next_id;
                self.next_id += 1;
                id
            });
            // Fresh ids must stay ahead of everything seen so far.
            self.next_id = self.next_id.max(id + 1);
            out.push(BBox { track_id: id, ..*d });
        }
        self.prev = out.clone();
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StcParams {
    /// Past frames per cube; the cube predicts the frame after the window.
    pub t_len: usize,
    /// Minimum box side (px) after clipping; smaller tracks are skipped.
    pub min_box_side: i32,
}

impl Default for StcParams {
    fn default() -> Self {
        StcParams {
            t_len: 4,
            min_box_side: 2,
        }
    }
}

/// Per-object stack of crops: `t_len` past frames, the flows between them,
/// and the next-frame target crop.
#[derive(Clone, Debug)]
pub struct STCube {
    pub track_id: u32,
    pub frame_index: usize,
    /// [t_len, 3, 32, 32]
    pub img_window: Tensor<f32>,
    /// [t_len-1, 2, 32, 32], displacements rescaled to crop coordinates.
    pub flow_window: Tensor<f32>,
    /// [3, 32, 32]
    pub target_img: Tensor<f32>,
    pub box_at_t: BBox,
    pub box_at_t1: BBox,
}

fn crop_resize_plane(src: &[f32], _h: usize, w: usize, b: &BBox, out: &mut [f32]) {
    let (bw, bh) = (b.width() as usize, b.height() as usize);
    let mut crop = vec![0.0f32; bw * bh];
    for (row, y) in (b.y_min..b.y_max).enumerate() {
        let start = y as usize * w + b.x_min as usize;
        crop[row * bw..(row + 1) * bw].copy_from_slice(&src[start..start + bw]);
    }
    resize_bilinear(&crop, bh, bw, CUBE_SIZE, CUBE_SIZE, out);
}

fn crop_frame(frames: &Tensor<f32>, t: usize, b: &BBox) -> Tensor<f32> {
    let (h, w) = (frames.shape()[2], frames.shape()[3]);
    let plane = h * w;
    let base = t * 3 * plane;
    let mut out = vec![0.0f32; 3 * CUBE_SIZE * CUBE_SIZE];
    for c in 0..3 {
        crop_resize_plane(
            &frames.data()[base + c * plane..base + (c + 1) * plane],
            h,
            w,
            b,
            &mut out[c * CUBE_SIZE * CUBE_SIZE..(c + 1) * CUBE_SIZE * CUBE_SIZE],
        );
    }
    Tensor::from_vec(vec![3, CUBE_SIZE, CUBE_SIZE], out).expect("crop dims")
}

fn crop_flow(flows: &Tensor<f32>, pair: usize, b: &BBox) -> Tensor<f32> {
    let (h, w) = (flows.shape()[2], flows.shape()[3]);
    let plane = h * w;
    let base = pair * 2 * plane;
    let mut out = vec![0.0f32; 2 * CUBE_SIZE * CUBE_SIZE];
    crop_resize_plane(
        &flows.data()[base..base + plane],
        h,
        w,
        b,
        &mut out[..CUBE_SIZE * CUBE_SIZE],
    );
    crop_resize_plane(
        &flows.data()[base + plane..base + 2 * plane],
        h,
        w,
        b,
        &mut out[CUBE_SIZE * CUBE_SIZE..],
    );
    // Rescale displacements by the crop-to-32 factors so motion stays
    // consistent after resizing.
    let su = CUBE_SIZE as f32 / b.width() as f32;
    let sv = CUBE_SIZE as f32 / b.height() as f32;
    for v in out[..CUBE_SIZE * CUBE_SIZE].iter_mut() {
        *v *= su;
    }
    for v in out[CUBE_SIZE * CUBE_SIZE..].iter_mut() {
        *v *= sv;
    }
    Tensor::from_vec(vec![2, CUBE_SIZE, CUBE_SIZE], out).expect("flow crop dims")
}

fn check_cube_bounds(num_frames: usize, t: usize, t_len: usize) -> Result<()> {
    if t + 1 < t_len {
        return Err(VadError::Config(format!(
            "cube at frame {t} needs {t_len} past frames"
        )));
    }
    if t + 1 >= num_frames {
        return Err(VadError::Config(format!(
            "cube at frame {t} needs frame {} in a {num_frames}-frame clip",
            t + 1
        )));
    }
    Ok(())
}

/// Per-frame boxes of one track across [t - t_len + 1, t + 1], or None if
/// the track is absent or degenerate anywhere in the window.
fn window_boxes(
    boxes_per_frame: &[Vec<BBox>],
    t: usize,
    track_id: u32,
    params: &StcParams,
) -> Option<Vec<BBox>> {
    let window_start = t + 1 - params.t_len;
    let mut out = Vec::with_capacity(params.t_len + 1);
    for frame in window_start..=t + 1 {
        let b = boxes_per_frame[frame]
            .iter()
            .find(|b| b.track_id == track_id)?;
        if b.width() < params.min_box_side || b.height() < params.min_box_side {
            log::warn!("skipping track {track_id} at frame {frame}: degenerate box");
            return None;
        }
        out.push(*b);
    }
    Some(out)
}

/// Cheap presence check used to enumerate cube candidates without cropping.
pub fn cube_exists(
    boxes_per_frame: &[Vec<BBox>],
    num_frames: usize,
    t: usize,
    track_id: u32,
    params: &StcParams,
) -> bool {
    check_cube_bounds(num_frames, t, params.t_len).is_ok()
        && window_boxes(boxes_per_frame, t, track_id, params).is_some()
}

/// Build the cube for one (frame, track) pair, if the window is complete.
pub fn extract_cube(
    frames: &Tensor<f32>,
    flows: &Tensor<f32>,
    boxes_per_frame: &[Vec<BBox>],
    t: usize,
    track_id: u32,
    params: &StcParams,
) -> Result<Option<STCube>> {
    check_cube_bounds(frames.shape()[0], t, params.t_len)?;
    let Some(boxes) = window_boxes(boxes_per_frame, t, track_id, params) else {
        return Ok(None);
    };
    let t_len = params.t_len;
    let window_start = t + 1 - t_len;
    let mut img_window = Vec::with_capacity(t_len * 3 * CUBE_SIZE * CUBE_SIZE);
    for (i, frame) in (window_start..=t).enumerate() {
        img_window.extend_from_slice(crop_frame(frames, frame, &boxes[i]).data());
    }
    let mut flow_window = Vec::with_capacity((t_len - 1) * 2 * CUBE_SIZE * CUBE_SIZE);
    for (i, frame) in (window_start..t).enumerate() {
        flow_window.extend_from_slice(crop_flow(flows, frame, &boxes[i]).data());
    }
    let target_img = crop_frame(frames, t + 1, &boxes[t_len]);
    Ok(Some(STCube {
        track_id,
        frame_index: t,
        img_window: Tensor::from_vec(vec![t_len, 3, CUBE_SIZE, CUBE_SIZE], img_window)
            .map_err(VadError::Tensor)?,
        flow_window: Tensor::from_vec(vec![t_len - 1, 2, CUBE_SIZE, CUBE_SIZE], flow_window)
            .map_err(VadError::Tensor)?,
        target_img,
        box_at_t: boxes[t_len - 1],
        box_at_t1: boxes[t_len],
    }))
}

/// Build cubes for every track that is present (with a usable box) across
/// the whole window [t - t_len + 1, t] and at the target frame t + 1.
pub fn extract_stc(
    frames: &Tensor<f32>,
    flows: &Tensor<f32>,
    boxes_per_frame: &[Vec<BBox>],
    t: usize,
    params: &StcParams,
) -> Result<Vec<STCube>> {
    check_cube_bounds(frames.shape()[0], t, params.t_len)?;
    let mut track_ids: Vec<u32> = boxes_per_frame[t].iter().map(|b| b.track_id).collect();
    track_ids.sort_unstable();
    track_ids.dedup();
    let mut cubes = Vec::new();
    for id in track_ids {
        if let Some(cube) = extract_cube(frames, flows, boxes_per_frame, t, id, params)? {
            cubes.push(cube);
        }
    }
    Ok(cubes)
}

/// Frame-level score field; stays exactly zero outside every box.
#[derive(Clone, Debug)]
pub struct AnomalyMap {
    pub h: usize,
    pub w: usize,
    pub scores: Vec<f32>,
    pub frame_score: f64,
}

impl AnomalyMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        AnomalyMap {
            h,
            w,
            scores: vec![0.0; h * w],
            frame_score: 0.0,
        }
    }
}

/// Resize a 32x32 patch to the box extents and write it into the map;
/// overlapping boxes combine per-pixel by max.
pub fn scatter_patch(map: &mut AnomalyMap, b: &BBox, patch: &[f32]) {
    debug_assert_eq!(patch.len(), CUBE_SIZE * CUBE_SIZE);
    let Some(b) = b.clip(map.w, map.h) else {
        return;
    };
    let (bw, bh) = (b.width() as usize, b.height() as usize);
    let mut resized = vec![0.0f32; bw * bh];
    resize_bilinear(patch, CUBE_SIZE, CUBE_SIZE, bh, bw, &mut resized);
    for (row, y) in (b.y_min..b.y_max).enumerate() {
        for (col, x) in (b.x_min..b.x_max).enumerate() {
            let slot = &mut map.scores[y as usize * map.w + x as usize];
            *slot = slot.max(resized[row * bw + col]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::ObjectClass;

    fn gt_box(x0: i32, y0: i32, x1: i32, y1: i32, id: u32) -> BBox {
        BBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            class: ObjectClass::Vehicle,
            track_id: id,
            provenance: Provenance::GroundTruth,
        }
    }

    #[test]
    fn identity_stub_preserves_boxes() {
        let boxes = vec![gt_box(5, 5, 25, 20, 0), gt_box(40, 10, 55, 22, 1)];
        let out = detect_boxes(&boxes, 3, 64, 64, &DetectorStub::identity(9));
        assert_eq!(out.len(), 2);
        for (got, want) in out.iter().zip(&boxes) {
            assert_eq!(
                (got.x_min, got.y_min, got.x_max, got.y_max, got.track_id),
                (want.x_min, want.y_min, want.x_max, want.y_max, want.track_id)
            );
            assert_eq!(got.provenance, Provenance::Detected);
        }
    }

    #[test]
    fn full_miss_rate_drops_everything() {
        let boxes = vec![gt_box(5, 5, 25, 20, 0), gt_box(40, 10, 55, 22, 1)];
        let stub = DetectorStub {
            miss_rate: 1.0,
            ..DetectorStub::identity(9)
        };
        assert!(detect_boxes(&boxes, 0, 64, 64, &stub).is_empty());
    }

    /// Monte-Carlo oracle over the jitter distribution: with sigma = 2 the
    /// mean IoU against ground truth lands in a broad but telling band.
    #[test]
    fn jitter_mean_iou_in_expected_band() {
        let gt = gt_box(22, 22, 42, 42, 7);
        let stub = DetectorStub {
            jitter_sigma: 2.0,
            ..DetectorStub::identity(123)
        };
        let trials = 10_000;
        let mut sum = 0.0;
        let mut kept = 0usize;
        for trial in 0..trials {
            for b in detect_boxes(&[gt], trial, 64, 64, &stub) {
                sum += gt.iou(&b);
                kept += 1;
            }
        }
        assert!(kept > trials * 9 / 10);
        let mean = sum / kept as f64;
        assert!((0.6..=0.95).contains(&mean), "mean IoU {mean}");
    }

    #[test]
    fn detection_determinism_per_frame_and_track() {
        let boxes = vec![gt_box(10, 10, 30, 26, 4)];
        let stub = DetectorStub {
            jitter_sigma: 1.5,
            miss_rate: 0.2,
            ..DetectorStub::identity(55)
        };
        let a = detect_boxes(&boxes, 17, 64, 64, &stub);
        let b = detect_boxes(&boxes, 17, 64, 64, &stub);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.x_min, x.y_min, x.x_max, x.y_max), (y.x_min, y.y_min, y.x_max, y.y_max));
        }
    }

    fn const_frames(t: usize, h: usize, w: usize, fill: impl Fn(usize, usize, usize, usize) -> f32) -> Tensor<f32> {
        let mut data = vec![0.0f32; t * 3 * h * w];
        for ti in 0..t {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data[((ti * 3 + c) * h + y) * w + x] = fill(ti, c, y, x);
                    }
                }
            }
        }
        Tensor::from_vec(vec![t, 3, h, w], data).unwrap()
    }

    #[test]
    fn exact_32_box_crop_is_identity() {
        let (h, w) = (32, 32);
        let frames = const_frames(6, h, w, |_, c, y, x| (c * 1000 + y * 32 + x) as f32 / 4000.0);
        let flows = Tensor::from_vec(vec![5, 2, h, w], vec![0.25f32; 5 * 2 * h * w]).unwrap();
        let boxes: Vec<Vec<BBox>> = (0..6).map(|_| vec![gt_box(0, 0, 32, 32, 0)]).collect();
        let cubes = extract_stc(&frames, &flows, &boxes, 3, &StcParams::default()).unwrap();
        assert_eq!(cubes.len(), 1);
        let cube = &cubes[0];
        // Crops equal raw pixels when the box is exactly 32x32.
        assert_eq!(
            &cube.img_window.data()[..3 * 32 * 32],
            &frames.data()[..3 * 32 * 32]
        );
        assert_eq!(cube.target_img.data(), &frames.data()[4 * 3 * 32 * 32..5 * 3 * 32 * 32]);
        // Scale factor 32/32 = 1 leaves flow untouched.
        assert!(cube.flow_window.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn double_size_box_halves_flow_u() {
        let (h, w) = (64, 64);
        let frames = const_frames(6, h, w, |_, _, y, x| ((x + y) % 7) as f32 / 7.0);
        let mut flow_data = vec![0.0f32; 5 * 2 * h * w];
        for pair in 0..5 {
            for i in 0..h * w {
                flow_data[pair * 2 * h * w + i] = 2.0; // u
                flow_data[pair * 2 * h * w + h * w + i] = 1.0; // v
            }
        }
        let flows = Tensor::from_vec(vec![5, 2, h, w], flow_data).unwrap();
        let boxes: Vec<Vec<BBox>> = (0..6).map(|_| vec![gt_box(0, 0, 64, 64, 0)]).collect();
        let cubes = extract_stc(&frames, &flows, &boxes, 3, &StcParams::default()).unwrap();
        let cube = &cubes[0];
        let plane = CUBE_SIZE * CUBE_SIZE;
        assert!(cube.flow_window.data()[..plane]
            .iter()
            .all(|&u| (u - 1.0).abs() < 1e-6));
        assert!(cube.flow_window.data()[plane..2 * plane]
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn track_absent_early_in_window_emits_no_cube() {
        let (h, w) = (32, 32);
        let frames = const_frames(6, h, w, |_, _, _, _| 0.5);
        let flows = Tensor::from_vec(vec![5, 2, h, w], vec![0.0f32; 5 * 2 * h * w]).unwrap();
        let mut boxes: Vec<Vec<BBox>> = (0..6).map(|_| vec![gt_box(4, 4, 20, 20, 0)]).collect();
        let params = StcParams {
            t_len: 2,
            ..StcParams::default()
        };
        // Present everywhere: one cube at t=2.
        assert_eq!(extract_stc(&frames, &flows, &boxes, 2, &params).unwrap().len(), 1);
        // Absent at t-1: none.
        boxes[1].clear();
        assert!(extract_stc(&frames, &flows, &boxes, 2, &params).unwrap().is_empty());
        // Cube count never exceeds box count at t.
        let cubes = extract_stc(&frames, &flows, &boxes, 3, &params).unwrap();
        assert!(cubes.len() <= boxes[3].len());
    }

    #[test]
    fn scatter_patch_rules() {
        let mut map = AnomalyMap::zeros(48, 48);
        // No boxes: all zeros.
        assert!(map.scores.iter().all(|&v| v == 0.0));

        // One box with a constant patch: c inside, 0 outside.
        let patch_lo = vec![0.4f32; CUBE_SIZE * CUBE_SIZE];
        let b1 = gt_box(8, 8, 24, 20, 0);
        scatter_patch(&mut map, &b1, &patch_lo);
        for y in 0..48 {
            for x in 0..48 {
                let inside = (8..24).contains(&x) && (8..20).contains(&y);
                let v = map.scores[y as usize * 48 + x as usize];
                if inside {
                    assert!((v - 0.4).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }

        // Overlapping box with a larger constant wins in the overlap.
        let patch_hi = vec![0.9f32; CUBE_SIZE * CUBE_SIZE];
        let b2 = gt_box(16, 10, 36, 30, 1);
        scatter_patch(&mut map, &b2, &patch_hi);
        assert!((map.scores[12 * 48 + 20] - 0.9).abs() < 1e-6); // overlap region
        assert!((map.scores[12 * 48 + 10] - 0.4).abs() < 1e-6); // b1 only
    }

    /// Support of the scattered map equals the union of the boxes exactly.
    #[test]
    fn scatter_support_equals_box_union() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let mut map = AnomalyMap::zeros(40, 40);
            let mut union = vec![false; 40 * 40];
            for id in 0..3 {
                let x0 = rng.gen_range(0..30);
                let y0 = rng.gen_range(0..30);
                let b = gt_box(x0, y0, x0 + rng.gen_range(3..10), y0 + rng.gen_range(3..10), id);
                let patch: Vec<f32> = (0..CUBE_SIZE * CUBE_SIZE)
                    .map(|_| rng.gen_range(0.1..1.0f32))
                    .collect();
                scatter_patch(&mut map, &b, &patch);
                for y in b.y_min..b.y_max {
                    for x in b.x_min..b.x_max {
                        union[y as usize * 40 + x as usize] = true;
                    }
                }
            }
            for i in 0..40 * 40 {
                assert_eq!(map.scores[i] > 0.0, union[i], "support mismatch at {i}");
            }
        }
    }

    #[test]
    fn tracker_keeps_ids_and_opens_new_tracks() {
        let mut tracker = IouTracker::new(0.2);
        let f0 = tracker.step(&[gt_box(10, 10, 20, 20, 99), gt_box(30, 30, 40, 40, 98)]);
        assert_eq!(f0.iter().map(|b| b.track_id).collect::<Vec<_>>(), vec![0, 1]);
        // Slightly moved boxes keep their ids; a new box gets a fresh id.
        let f1 = tracker.step(&[
            gt_box(11, 10, 21, 20, 0),
            gt_box(50, 5, 58, 12, 0),
            gt_box(29, 31, 39, 41, 0),
        ]);
        assert_eq!(f1[0].track_id, 0);
        assert_eq!(f1[2].track_id, 1);
        assert_eq!(f1[1].track_id, 2);
    }
}

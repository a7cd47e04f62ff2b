//! Evaluation metrics: frame-wise AUROC with tie grouping, FPR at a target
//! TPR, pixel-wise FPR95 restricted to the GT/predicted box overlap, and
//! greedy box IoU. Plus the CSV/PGM writers the report bundle uses.

use crate::error::{Result, VadError};
use crate::scenegen::BBox;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug)]
pub struct RocCurve {
    /// Ordered from the highest threshold (0,0) to the lowest (1,1).
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// ROC over all distinct thresholds with ties grouped, so the trapezoid area
/// equals the rank statistic with tie correction.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(VadError::UndefinedMetric("roc needs matched, non-empty inputs".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(VadError::UndefinedMetric(
            "roc needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auroc = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = scores[order[i]];
        let mut group_tp = 0usize;
        let mut group_fp = 0usize;
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            i += 1;
        }
        let prev_tpr = tp as f64 / pos as f64;
        let prev_fpr = fp as f64 / neg as f64;
        tp += group_tp;
        fp += group_fp;
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push(RocPoint {
            threshold,
            tpr,
            fpr,
        });
    }
    Ok(RocCurve { points, auroc })
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.auroc)
}

/// FPR at the largest threshold reaching TPR >= target, sweeping thresholds
/// from high to low (predicted positive means score >= threshold).
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], target: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(VadError::UndefinedMetric("fpr needs matched, non-empty inputs".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 {
        return Err(VadError::UndefinedMetric("fpr_at_tpr needs positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // A threshold above every score predicts nothing positive.
    if target <= 0.0 {
        return Ok(0.0);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp as f64 / pos as f64 >= target {
            return Ok(if neg == 0 { 0.0 } else { fp as f64 / neg as f64 });
        }
    }
    // TPR reaches 1.0 at the lowest threshold, so target <= 1 always crossed.
    Ok(1.0)
}

/// Pool pixels lying in (union of GT boxes) AND (union of predicted boxes)
/// across frames, label them by the GT mask, and compute FPR at 95% TPR.
pub fn pixel_fpr95_overlap(
    maps: &[&[f32]],
    gt_masks: &[&[bool]],
    gt_boxes: &[Vec<BBox>],
    pred_boxes: &[Vec<BBox>],
    h: usize,
    w: usize,
    target: f64,
) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (((map, mask), gts), preds) in maps
        .iter()
        .zip(gt_masks)
        .zip(gt_boxes)
        .zip(pred_boxes)
    {
        let mut gt_union = vec![false; h * w];
        for b in gts {
            for y in b.y_min.max(0)..b.y_max.min(h as i32) {
                for x in b.x_min.max(0)..b.x_max.min(w as i32) {
                    gt_union[y as usize * w + x as usize] = true;
                }
            }
        }
        for b in preds {
            for y in b.y_min.max(0)..b.y_max.min(h as i32) {
                for x in b.x_min.max(0)..b.x_max.min(w as i32) {
                    let i = y as usize * w + x as usize;
                    if gt_union[i] {
                        scores.push(map[i] as f64);
                        labels.push(mask[i]);
                        gt_union[i] = false; // overlapping pred boxes pool once
                    }
                }
            }
        }
    }
    if scores.is_empty() {
        return Err(VadError::UndefinedMetric(
            "empty overlap region between GT and predicted boxes".into(),
        ));
    }
    fpr_at_tpr(&scores, &labels, target)
}

/// Greedy one-to-one matching by descending IoU; unmatched GT boxes count as
/// zero; the mean runs over GT boxes.
pub fn mean_box_iou(gt: &[BBox], pred: &[BBox]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let iou = g.iou(p);
            if iou > 0.0 {
                pairs.push((iou, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut total = 0.0;
    for (iou, gi, pi) in pairs {
        if gt_used[gi] || pred_used[pi] {
            continue;
        }
        gt_used[gi] = true;
        pred_used[pi] = true;
        total += iou;
    }
    total / gt.len() as f64
}

// ── report writers ──────────────────────────────────────────────────

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| VadError::io(path.display().to_string(), e))
}

/// Grayscale binary PGM, normalized to the map's max (black if all zero).
pub fn write_pgm(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    let max = data.iter().copied().fold(0.0f32, f32::max);
    let file = std::fs::File::create(path).map_err(|e| VadError::io(path.display().to_string(), e))?;
    let mut writer = std::io::BufWriter::new(file);
    let io_err = |e| VadError::io(path.display().to_string(), e);
    write!(writer, "P5\n{w} {h}\n255\n").map_err(io_err)?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| {
            if max > 0.0 {
                ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    writer.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{ObjectClass, Provenance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent pairwise-comparison statistic: P(pos > neg) + 0.5 P(tie).
    fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0f64;
        let mut total = 0.0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn auroc_examples() {
        // Perfect separation.
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, true, false, false];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);

        // Mixed case from the pairwise oracle.
        let s = [0.9, 0.8, 0.3, 0.2];
        let l = [true, false, false, true];
        let got = auroc(&s, &l).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
        assert!((got - pairwise_auroc(&s, &l)).abs() < 1e-15);

        // All scores tied.
        let s = [0.5; 6];
        let l = [true, false, true, false, false, true];
        assert!((auroc(&s, &l).unwrap() - 0.5).abs() < 1e-15);

        // Single class errors out.
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..200 {
            let n = rng.gen_range(4..120);
            let quantize = rng.gen_bool(0.5);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.0f64..1.0);
                    if quantize {
                        (v * 8.0).round() / 8.0
                    } else {
                        v
                    }
                })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let got = auroc(&scores, &labels).unwrap();
            let want = pairwise_auroc(&scores, &labels);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let scores: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut labels: Vec<bool> = (0..60).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auroc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&v| (3.0 * v).tanh() as f64).collect();
        let shifted: Vec<f64> = scores.iter().map(|&v| 10.0 * v + 100.0).collect();
        assert!((auroc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
        assert!((auroc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_endpoints_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let curve = roc_curve(&scores, &labels).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!((first.tpr, first.fpr), (0.0, 0.0));
        assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        for pair in curve.points.windows(2) {
            assert!(pair[1].tpr >= pair[0].tpr);
            assert!(pair[1].fpr >= pair[0].fpr);
            assert!(pair[1].threshold <= pair[0].threshold);
        }
    }

    /// Exhaustive threshold-sweep oracle: try every candidate threshold from
    /// high to low and report FPR at the first TPR crossing.
    fn sweep_oracle(scores: &[f64], labels: &[bool], target: f64) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        if target <= 0.0 {
            return 0.0;
        }
        for thr in thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **l && **s >= thr)
                .count();
            if tp as f64 / pos as f64 >= target {
                let fp = scores
                    .iter()
                    .zip(labels)
                    .filter(|(s, l)| !**l && **s >= thr)
                    .count();
                return if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
            }
        }
        1.0
    }

    #[test]
    fn fpr_at_tpr_examples() {
        // All positives above all negatives.
        let scores = [0.9, 0.85, 0.8, 0.3, 0.2];
        let labels = [true, true, true, false, false];
        assert_eq!(fpr_at_tpr(&scores, &labels, 0.95).unwrap(), 0.0);

        // Ten positives, one below every negative: reaching 95% TPR needs a
        // threshold under all negatives.
        let mut scores = vec![0.9; 9];
        let mut labels = vec![true; 9];
        scores.push(0.05);
        labels.push(true);
        for _ in 0..6 {
            scores.push(0.5);
            labels.push(false);
        }
        assert_eq!(fpr_at_tpr(&scores, &labels, 0.95).unwrap(), 1.0);
        assert_eq!(sweep_oracle(&scores, &labels, 0.95), 1.0);

        // 19 of 20 positives above the negatives reaches 0.95 exactly.
        let mut scores = vec![0.9; 19];
        let mut labels = vec![true; 19];
        scores.push(0.05);
        labels.push(true);
        for _ in 0..10 {
            scores.push(0.5);
            labels.push(false);
        }
        assert_eq!(fpr_at_tpr(&scores, &labels, 0.95).unwrap(), 0.0);
        assert_eq!(sweep_oracle(&scores, &labels, 0.95), 0.0);

        assert!(fpr_at_tpr(&[0.5, 0.4], &[false, false], 0.95).is_err());
    }

    #[test]
    fn fpr_matches_sweep_oracle_and_is_monotone_in_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..200 {
            let n = rng.gen_range(4..80);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0f64..1.0) * 6.0).round() / 6.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let mut prev = 0.0;
            for target in [0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0] {
                let got = fpr_at_tpr(&scores, &labels, target).unwrap();
                let want = sweep_oracle(&scores, &labels, target);
                assert_eq!(got, want, "target {target}");
                assert!(got >= prev);
                prev = got;
            }
        }
    }

    fn bbox(x0: i32, y0: i32, x1: i32, y1: i32) -> BBox {
        BBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            class: ObjectClass::Vehicle,
            track_id: 0,
            provenance: Provenance::GroundTruth,
        }
    }

    #[test]
    fn iou_examples() {
        let a = vec![bbox(0, 0, 10, 10), bbox(20, 20, 30, 28)];
        assert_eq!(mean_box_iou(&a, &a), 1.0);

        let gt = vec![bbox(0, 0, 10, 10)];
        let pred = vec![bbox(5, 0, 15, 10)];
        assert!((mean_box_iou(&gt, &pred) - 1.0 / 3.0).abs() < 1e-12);

        assert_eq!(mean_box_iou(&gt, &[]), 0.0);
        // Bounded in [0, 1] and symmetric for identical sets.
        assert!(mean_box_iou(&a, &[bbox(2, 2, 8, 8)]) <= 1.0);
    }

    #[test]
    fn pixel_overlap_pooling() {
        let (h, w) = (8, 8);
        // Frame 1: GT box = pred box covering a 4x4 region with a 2x2
        // anomalous mask; frame 2: disjoint GT/pred contributes nothing.
        let gt1 = vec![bbox(0, 0, 4, 4)];
        let pred1 = vec![bbox(0, 0, 4, 4)];
        let gt2 = vec![bbox(0, 0, 2, 2)];
        let pred2 = vec![bbox(6, 6, 8, 8)];
        let mut mask1 = vec![false; h * w];
        for y in 0..2 {
            for x in 0..2 {
                mask1[y * w + x] = true;
            }
        }
        let mask2 = vec![false; h * w];
        let mut map1 = vec![0.0f32; h * w];
        for y in 0..2 {
            for x in 0..2 {
                map1[y * w + x] = 0.9;
            }
        }
        map1[3 * w + 3] = 0.5; // one sub-threshold normal pixel
        let map2 = vec![0.0f32; h * w];

        // Manual oracle: pooled region is the 16 pixels of frame 1's box.
        // 4 positives at 0.9; threshold 0.9 reaches TPR 1.0 >= 0.95 with one
        // negative at 0.5 below it and eleven at 0.0: FPR = 0/12 = 0.
        let got = pixel_fpr95_overlap(
            &[&map1, &map2],
            &[&mask1, &mask2],
            &[gt1.clone(), gt2.clone()],
            &[pred1.clone(), pred2.clone()],
            h,
            w,
            0.95,
        )
        .unwrap();
        assert_eq!(got, 0.0);

        // If anomalous pixels score zero (e.g. the box was never scored),
        // reaching 95% TPR requires threshold 0 and every pixel fires.
        let cold = vec![0.0f32; h * w];
        let got = pixel_fpr95_overlap(
            &[&cold],
            &[&mask1],
            &[gt1.clone()],
            &[pred1],
            h,
            w,
            0.95,
        )
        .unwrap();
        assert_eq!(got, 1.0);

        // Disjoint boxes leave the pool empty.
        assert!(pixel_fpr95_overlap(&[&map2], &[&mask2], &[gt2], &[vec![bbox(6, 6, 8, 8)]], h, w, 0.95)
            .is_err());
    }

    #[test]
    fn pgm_writer_emits_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let data = vec![0.0f32, 0.5, 1.0, 2.0];
        write_pgm(&path, &data, 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
        assert_eq!(*bytes.last().unwrap(), 255); // max value maps to white
    }
}

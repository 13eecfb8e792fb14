//! Detection metrics: greedy matching, all-point interpolated average
//! precision, mAP@0.5 / mAP@0.5:0.95, per-class tables and the confusion
//! matrix.
//!
//! Matching is same-class only (the standard mAP protocol); a detection that
//! overlaps a ground truth of another class is a false positive for its own
//! class, and the confusion matrix books the pair through the background
//! row/column.

use rayon::prelude::*;

use crate::detection::{iou, DetectionBox, GtBox};

/// IoU thresholds for mAP@0.5:0.95 (0.50 to 0.95 in steps of 0.05).
pub const IOU_RANGE: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Matched detection: confidence plus whether it claimed a ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedDetection {
    pub class_id: usize,
    pub confidence: f64,
    pub tp: bool,
}

/// Greedy same-class matching for one image. Detections are visited in
/// descending confidence; each claims the unmatched same-class ground truth
/// with the highest IoU at or above the threshold. Returns per-detection
/// flags (in visit order) and the number of unmatched ground truths.
pub fn match_detections(
    dets: &[DetectionBox],
    gts: &[GtBox],
    iou_thr: f64,
) -> (Vec<MatchedDetection>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(dets[a].cx.total_cmp(&dets[b].cx))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(d, &g.as_detection());
            if v >= iou_thr {
                let better = match best {
                    Some((bv, _)) => v > bv,
                    None => true,
                };
                if better {
                    best = Some((v, gi));
                }
            }
        }
        let tp = if let Some((_, gi)) = best {
            gt_taken[gi] = true;
            true
        } else {
            false
        };
        out.push(MatchedDetection { class_id: d.class_id, confidence: d.confidence, tp });
    }
    let unmatched = gt_taken.iter().filter(|&&t| !t).count();
    (out, unmatched)
}

/// All-point interpolated average precision: the area under the precision
/// envelope as a function of recall.
pub fn average_precision(pairs: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 || pairs.is_empty() {
        return 0.0;
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = sorted.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in sorted.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: running max from the right
    for i in (0..n - 1).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        ap += (recalls[i] - prev_r) * precisions[i];
        prev_r = recalls[i];
    }
    ap
}

/// Per-class metric row of an [`EvalReport`].
#[derive(Clone, Debug)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub n_gt: usize,
    pub n_det: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

/// Aggregate evaluation over a dataset.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub map50: f64,
    pub map50_95: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// (num_classes + 1) square; row = predicted, column = ground truth,
    /// last index = background.
    pub confusion: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub conf_thr: f64,
    pub iou_thr: f64,
}

/// Evaluate detections against ground truth.
///
/// AP uses every provided detection (callers decode with a low confidence
/// floor); precision/recall and the confusion matrix are computed at the
/// `conf_thr` operating point with IoU `iou_thr`.
pub fn evaluate(
    dets_per_image: &[Vec<DetectionBox>],
    gts_per_image: &[Vec<GtBox>],
    num_classes: usize,
    conf_thr: f64,
    iou_thr: f64,
) -> EvalReport {
    assert_eq!(dets_per_image.len(), gts_per_image.len(), "image count mismatch");

    // gather per-class (confidence, tp) pairs at each IoU threshold
    let per_image: Vec<Vec<(usize, Vec<MatchedDetection>)>> = dets_per_image
        .par_iter()
        .zip(gts_per_image.par_iter())
        .map(|(dets, gts)| {
            IOU_RANGE
                .iter()
                .enumerate()
                .map(|(ti, &thr)| {
                    let (matched, _) = match_detections(dets, gts, thr);
                    (ti, matched)
                })
                .collect()
        })
        .collect();

    let mut pairs_by_thr_class: Vec<Vec<Vec<(f64, bool)>>> =
        vec![vec![Vec::new(); num_classes]; IOU_RANGE.len()];
    for image in &per_image {
        for (ti, matched) in image {
            for m in matched {
                if m.class_id < num_classes {
                    pairs_by_thr_class[*ti][m.class_id].push((m.confidence, m.tp));
                }
            }
        }
    }
    let mut gt_counts = vec![0usize; num_classes];
    let mut det_counts = vec![0usize; num_classes];
    for gts in gts_per_image {
        for g in gts {
            if g.class_id < num_classes {
                gt_counts[g.class_id] += 1;
            }
        }
    }
    for dets in dets_per_image {
        for d in dets {
            if d.class_id < num_classes {
                det_counts[d.class_id] += 1;
            }
        }
    }

    // operating-point P/R at IoU `iou_thr` with confidence >= conf_thr
    let mut tp_at = vec![0usize; num_classes];
    let mut fp_at = vec![0usize; num_classes];
    for (dets, gts) in dets_per_image.iter().zip(gts_per_image) {
        let kept: Vec<DetectionBox> = dets
            .iter()
            .copied()
            .filter(|d| d.confidence >= conf_thr)
            .collect();
        let (matched, _) = match_detections(&kept, gts, iou_thr);
        for m in &matched {
            if m.class_id < num_classes {
                if m.tp {
                    tp_at[m.class_id] += 1;
                } else {
                    fp_at[m.class_id] += 1;
                }
            }
        }
    }

    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let ap50 = average_precision(&pairs_by_thr_class[0][c], gt_counts[c]);
        let ap_all: f64 = (0..IOU_RANGE.len())
            .map(|ti| average_precision(&pairs_by_thr_class[ti][c], gt_counts[c]))
            .sum::<f64>()
            / IOU_RANGE.len() as f64;
        let tp = tp_at[c] as f64;
        let fp = fp_at[c] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if gt_counts[c] > 0 { tp / gt_counts[c] as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class_id: c,
            n_gt: gt_counts[c],
            n_det: det_counts[c],
            precision,
            recall,
            f1,
            ap50,
            ap50_95: ap_all,
        });
    }

    // classes with no ground truth and no detections are excluded from means
    let included: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|m| m.n_gt > 0 || m.n_det > 0)
        .collect();
    let k = included.len().max(1) as f64;
    let map50 = included.iter().map(|m| m.ap50).sum::<f64>() / k;
    let map50_95 = included.iter().map(|m| m.ap50_95).sum::<f64>() / k;
    let mean_precision = included.iter().map(|m| m.precision).sum::<f64>() / k;
    let mean_recall = included.iter().map(|m| m.recall).sum::<f64>() / k;

    let confusion = confusion_matrix(dets_per_image, gts_per_image, num_classes, iou_thr, conf_thr);

    EvalReport {
        per_class,
        map50,
        map50_95,
        mean_precision,
        mean_recall,
        confusion,
        num_classes,
        conf_thr,
        iou_thr,
    }
}

/// Confusion matrix with a background row/column. Matched pairs increment
/// `(pred, gt)`; unmatched detections `(pred, background)`; unmatched ground
/// truths `(background, gt)`. Same-class matching means off-diagonal class
/// pairs only arise through background.
pub fn confusion_matrix(
    dets_per_image: &[Vec<DetectionBox>],
    gts_per_image: &[Vec<GtBox>],
    num_classes: usize,
    iou_thr: f64,
    conf_thr: f64,
) -> Vec<Vec<usize>> {
    let bg = num_classes;
    let mut m = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    for (dets, gts) in dets_per_image.iter().zip(gts_per_image) {
        let kept: Vec<DetectionBox> = dets
            .iter()
            .copied()
            .filter(|d| d.confidence >= conf_thr)
            .collect();
        let (matched, _) = match_detections(&kept, gts, iou_thr);
        // count matched gts per class to find the unmatched ones
        let mut gt_matched = vec![0usize; num_classes];
        for md in &matched {
            if md.class_id >= num_classes {
                continue;
            }
            if md.tp {
                m[md.class_id][md.class_id] += 1;
                gt_matched[md.class_id] += 1;
            } else {
                m[md.class_id][bg] += 1;
            }
        }
        let mut gt_total = vec![0usize; num_classes];
        for g in gts {
            if g.class_id < num_classes {
                gt_total[g.class_id] += 1;
            }
        }
        for c in 0..num_classes {
            m[bg][c] += gt_total[c].saturating_sub(gt_matched[c]);
        }
    }
    m
}

impl EvalReport {
    /// Human-readable table.
    pub fn render_table(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "evaluation at conf>={:.3}, iou={:.2} (AP: all-point interpolation)\n",
            self.conf_thr, self.iou_thr
        ));
        out.push_str(&format!(
            "{:<18} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            "class", "gt", "det", "P", "R", "F1", "AP50", "AP50-95"
        ));
        for m in &self.per_class {
            let name = class_names
                .get(m.class_id)
                .cloned()
                .unwrap_or_else(|| format!("class{}", m.class_id));
            out.push_str(&format!(
                "{:<18} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4}\n",
                name, m.n_gt, m.n_det, m.precision, m.recall, m.f1, m.ap50, m.ap50_95
            ));
        }
        out.push_str(&format!(
            "{:<18} {:>6} {:>6} {:>8.4} {:>8.4} {:>8} {:>8.4} {:>9.4}\n",
            "all",
            self.per_class.iter().map(|m| m.n_gt).sum::<usize>(),
            self.per_class.iter().map(|m| m.n_det).sum::<usize>(),
            self.mean_precision,
            self.mean_recall,
            "",
            self.map50,
            self.map50_95
        ));
        out
    }

    /// Machine-readable key=value lines.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("map50={:.6}\n", self.map50));
        out.push_str(&format!("map50_95={:.6}\n", self.map50_95));
        out.push_str(&format!("precision={:.6}\n", self.mean_precision));
        out.push_str(&format!("recall={:.6}\n", self.mean_recall));
        out.push_str(&format!("conf_thr={:.6}\n", self.conf_thr));
        out.push_str(&format!("iou_thr={:.6}\n", self.iou_thr));
        for m in &self.per_class {
            out.push_str(&format!(
                "class.{}.ap50={:.6}\nclass.{}.ap50_95={:.6}\nclass.{}.precision={:.6}\nclass.{}.recall={:.6}\n",
                m.class_id, m.ap50, m.class_id, m.ap50_95, m.class_id, m.precision, m.class_id, m.recall
            ));
        }
        out
    }

    /// Confusion matrix as tab-separated text (row = predicted).
    pub fn render_confusion(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            out.push_str(
                &row.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("\t"),
            );
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, conf: f64, cx: f64, cy: f64, w: f64, h: f64) -> DetectionBox {
        DetectionBox::new(class, conf, cx, cy, w, h)
    }

    fn gt(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> GtBox {
        GtBox { class_id: class, cx, cy, w, h }
    }

    #[test]
    fn matcher_perfect_hit() {
        let dets = [det(0, 0.9, 0.5, 0.5, 0.2, 0.2)];
        let gts = [gt(0, 0.5, 0.5, 0.2, 0.2)];
        let (m, unmatched) = match_detections(&dets, &gts, 0.5);
        assert!(m[0].tp);
        assert_eq!(unmatched, 0);
    }

    #[test]
    fn matcher_low_iou_is_fp_and_fn() {
        let dets = [det(0, 0.9, 0.3, 0.3, 0.1, 0.1)];
        let gts = [gt(0, 0.7, 0.7, 0.1, 0.1)];
        let (m, unmatched) = match_detections(&dets, &gts, 0.5);
        assert!(!m[0].tp);
        assert_eq!(unmatched, 1);
    }

    #[test]
    fn matcher_greedy_first_by_confidence() {
        let dets = [
            det(0, 0.8, 0.5, 0.5, 0.2, 0.2),
            det(0, 0.9, 0.5, 0.5, 0.2, 0.2),
        ];
        let gts = [gt(0, 0.5, 0.5, 0.2, 0.2)];
        let (m, _) = match_detections(&dets, &gts, 0.5);
        // visit order is confidence desc: 0.9 claims the gt, 0.8 is fp
        assert_eq!(m[0].confidence, 0.9);
        assert!(m[0].tp);
        assert!(!m[1].tp);
    }

    #[test]
    fn matcher_same_class_only() {
        let dets = [det(1, 0.9, 0.5, 0.5, 0.2, 0.2)];
        let gts = [gt(0, 0.5, 0.5, 0.2, 0.2)];
        let (m, unmatched) = match_detections(&dets, &gts, 0.5);
        assert!(!m[0].tp);
        assert_eq!(unmatched, 1);
    }

    #[test]
    fn ap_hand_traces() {
        // [TP(0.9), FP(0.8)], 1 gt -> AP 1.0
        assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), 1.0);
        // [FP(0.9), TP(0.8)], 1 gt -> AP 0.5
        assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), 0.5);
        // no detections
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn ap_unchanged_by_confidence_scaling() {
        let pairs = vec![(0.9, true), (0.7, false), (0.5, true), (0.2, false)];
        let scaled: Vec<(f64, bool)> = pairs.iter().map(|&(c, t)| (c * 0.31, t)).collect();
        let a = average_precision(&pairs, 3);
        let b = average_precision(&scaled, 3);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn ap_nondecreasing_when_fp_removed() {
        let pairs = vec![(0.9, true), (0.8, false), (0.6, true), (0.4, false)];
        let without_fp: Vec<(f64, bool)> = pairs
            .iter()
            .copied()
            .filter(|&(c, _)| c != 0.8)
            .collect();
        assert!(average_precision(&without_fp, 2) >= average_precision(&pairs, 2));
    }

    #[test]
    fn confusion_perfect_predictions_diagonal() {
        let dets = vec![vec![det(0, 0.9, 0.3, 0.3, 0.2, 0.2), det(1, 0.8, 0.7, 0.7, 0.2, 0.2)]];
        let gts = vec![vec![gt(0, 0.3, 0.3, 0.2, 0.2), gt(1, 0.7, 0.7, 0.2, 0.2)]];
        let m = confusion_matrix(&dets, &gts, 2, 0.5, 0.25);
        assert_eq!(m[0][0], 1);
        assert_eq!(m[1][1], 1);
        assert_eq!(m[2][0] + m[2][1] + m[0][2] + m[1][2], 0);
    }

    #[test]
    fn confusion_no_predictions_fills_background_row() {
        let dets = vec![vec![]];
        let gts = vec![vec![gt(0, 0.3, 0.3, 0.2, 0.2), gt(1, 0.7, 0.7, 0.2, 0.2)]];
        let m = confusion_matrix(&dets, &gts, 2, 0.5, 0.25);
        assert_eq!(m[2][0], 1);
        assert_eq!(m[2][1], 1);
    }

    #[test]
    fn confusion_misclassified_overlap_books_background_twice() {
        // IoU 1.0 but wrong class: one (pred, bg) and one (bg, gt)
        let dets = vec![vec![det(1, 0.9, 0.5, 0.5, 0.2, 0.2)]];
        let gts = vec![vec![gt(0, 0.5, 0.5, 0.2, 0.2)]];
        let m = confusion_matrix(&dets, &gts, 2, 0.5, 0.25);
        assert_eq!(m[1][2], 1);
        assert_eq!(m[2][0], 1);
        assert_eq!(m[1][0], 0);
    }

    #[test]
    fn evaluate_counts_precision_recall_exactly() {
        // 2 dets for class 0: one TP, one FP; 2 gts: one matched
        let dets = vec![vec![
            det(0, 0.9, 0.3, 0.3, 0.2, 0.2),
            det(0, 0.8, 0.8, 0.8, 0.1, 0.1),
        ]];
        let gts = vec![vec![gt(0, 0.3, 0.3, 0.2, 0.2), gt(0, 0.6, 0.6, 0.2, 0.2)]];
        let r = evaluate(&dets, &gts, 1, 0.25, 0.5);
        assert!((r.per_class[0].precision - 0.5).abs() < 1e-12);
        assert!((r.per_class[0].recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn map_range_not_above_map50() {
        let dets = vec![vec![
            det(0, 0.9, 0.31, 0.3, 0.2, 0.21),
            det(1, 0.7, 0.71, 0.72, 0.2, 0.18),
        ]];
        let gts = vec![vec![gt(0, 0.3, 0.3, 0.2, 0.2), gt(1, 0.7, 0.7, 0.2, 0.2)]];
        let r = evaluate(&dets, &gts, 2, 0.25, 0.5);
        assert!(r.map50_95 <= r.map50 + 1e-12);
    }

    #[test]
    fn class_without_gt_and_dets_excluded_from_mean() {
        let dets = vec![vec![det(0, 0.9, 0.3, 0.3, 0.2, 0.2)]];
        let gts = vec![vec![gt(0, 0.3, 0.3, 0.2, 0.2)]];
        let r = evaluate(&dets, &gts, 3, 0.25, 0.5);
        // classes 1 and 2 are silent; mAP is class 0's AP alone
        assert!((r.map50 - 1.0).abs() < 1e-12);
    }
}

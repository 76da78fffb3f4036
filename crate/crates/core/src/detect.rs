//! Non-maximum suppression, VOC-style average precision and detection export.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::boxes::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Indices sorted by descending score; equal scores keep ascending index.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy suppression of any box whose IoU with a kept box exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = dets[i];
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// [`nms`] applied independently within each class, merged by descending score.
pub fn nms_per_class(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let same: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        out.extend(nms(&same, iou_threshold));
    }
    let order = score_order(out.iter().map(|d| d.score));
    order.into_iter().map(|i| out[i]).collect()
}

/// Area under the precision envelope of a recall/precision sequence.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub ground_truths: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// Classes with at least one ground-truth box, ascending.
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

/// Mean AP over images given as parallel slices of detections and ground truth.
pub fn evaluate_map(detections: &[Vec<Detection>], ground_truth: &[Vec<GroundTruth>], iou_threshold: f64) -> MapReport {
    let mut classes: Vec<usize> = ground_truth.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class: Vec<ClassAp> = classes
        .into_iter()
        .map(|c| class_ap(detections, ground_truth, c, iou_threshold))
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    MapReport { per_class, map }
}

fn class_ap(detections: &[Vec<Detection>], ground_truth: &[Vec<GroundTruth>], class_id: usize, iou_threshold: f64) -> ClassAp {
    let gts: Vec<Vec<BBox>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|g| g.class_id == class_id).map(|g| g.bbox).collect())
        .collect();
    let total: usize = gts.iter().map(Vec::len).sum();
    let cands: Vec<(usize, Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, *d)))
        .filter(|(img, _)| *img < gts.len())
        .collect();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(cands.len());
    let mut precision = Vec::with_capacity(cands.len());
    for i in score_order(cands.iter().map(|(_, d)| d.score)) {
        let (img, d) = cands[i];
        let best = gts[img]
            .iter()
            .enumerate()
            .map(|(j, g)| (j, g.iou(&d.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= iou_threshold && !taken[img][j] => {
                taken[img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / total as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    ClassAp {
        class_id,
        ground_truths: total,
        ap: average_precision(&recall, &precision),
    }
}

/// `image_id class_id score x0 y0 x1 y1`, reals at six decimals.
pub fn format_detection(image_id: usize, d: &Detection) -> String {
    format!(
        "{image_id} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
        d.class_id, d.score, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1
    )
}

/// One [`format_detection`] line per detection, images in order.
pub fn format_detections(per_image: &[Vec<Detection>]) -> String {
    let mut s = String::new();
    for (img, dets) in per_image.iter().enumerate() {
        for d in dets {
            writeln!(s, "{}", format_detection(img, d)).expect("writing to a String");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class_id: 1,
            score,
        }
    }

    #[test]
    fn nms_single_and_duplicate() {
        assert_eq!(nms(&[det(0.0, 0.4)], 0.5), vec![det(0.0, 0.4)]);
        assert_eq!(nms(&[det(0.0, 0.8), det(0.0, 0.9)], 0.5), vec![det(0.0, 0.9)]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_ties_keep_lower_index() {
        let a = Detection { class_id: 1, ..det(0.0, 0.5) };
        let b = Detection { class_id: 2, ..det(0.0, 0.5) };
        assert_eq!(nms(&[a, b], 0.5), vec![a]);
        assert_eq!(nms(&[b, a], 0.5), vec![b]);
    }

    #[test]
    fn perfect_and_empty_map() {
        let gt = vec![vec![GroundTruth { bbox: det(0.0, 1.0).bbox, class_id: 1 }]];
        assert_eq!(evaluate_map(&[vec![det(0.0, 1.0)]], &gt, 0.5).map, 1.0);
        assert_eq!(evaluate_map(&[vec![]], &gt, 0.5).map, 0.0);
    }

    #[test]
    fn hand_enumerated_staircase() {
        // TP at 0.9, FP at 0.8, TP at 0.7 against two boxes: the envelope is
        // 1.0 over recall [0, 0.5] and 2/3 over (0.5, 1].
        let gt = vec![vec![
            GroundTruth { bbox: det(0.0, 1.0).bbox, class_id: 1 },
            GroundTruth { bbox: det(40.0, 1.0).bbox, class_id: 1 },
        ]];
        let dets = vec![vec![det(0.0, 0.9), det(80.0, 0.8), det(40.0, 0.7)]];
        let r = evaluate_map(&dets, &gt, 0.5);
        assert!((r.map - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_match_is_false_positive() {
        let gt = vec![vec![GroundTruth { bbox: det(0.0, 1.0).bbox, class_id: 1 }]];
        let r = evaluate_map(&[vec![det(0.0, 0.9), det(0.0, 0.8)]], &gt, 0.5);
        assert_eq!(r.map, 1.0);
        let r = evaluate_map(&[vec![det(0.0, 0.7), det(30.0, 0.8)]], &gt, 0.5);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn export_line_format() {
        let d = Detection {
            bbox: BBox::new(1.0, 2.5, 3.25, 4.0),
            class_id: 2,
            score: 0.5,
        };
        assert_eq!(format_detection(7, &d), "7 2 0.500000 1.000000 2.500000 3.250000 4.000000");
    }
}

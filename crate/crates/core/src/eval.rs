//! VOC-style detection evaluation: greedy matching, all-points-interpolated
//! average precision, and mAP over classes with ground truth.

use std::io::Write;

use crate::boxes::iou;
use crate::error::{Error, Result};
use crate::scene::SceneObject;
use crate::toydet::Detection;

pub const MATCH_IOU: f64 = 0.5;

/// One point on a precision-recall curve.
#[derive(Debug, Clone, Copy)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall curve of one class over a dataset.
#[derive(Debug, Clone)]
pub struct PrCurve {
    pub class: usize,
    pub points: Vec<PrPoint>,
    pub num_gt: usize,
}

/// Greedy one-to-one matching of score-sorted detections against ground
/// truth: a detection is a true positive when its best-IoU unmatched ground
/// truth of the same image reaches the threshold.
pub fn match_detections(
    dets: &[(usize, Detection)],
    gts_per_image: &[Vec<SceneObject>],
    class: usize,
    iou_thresh: f64,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts_per_image
        .iter()
        .map(|g| vec![false; g.len()])
        .collect();
    let mut flags = Vec::with_capacity(dets.len());
    for (img, det) in dets {
        let mut best = 0.0;
        let mut best_gt = None;
        for (g, gt) in gts_per_image[*img].iter().enumerate() {
            if gt.class != class || used[*img][g] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v > best {
                best = v;
                best_gt = Some(g);
            }
        }
        match best_gt {
            Some(g) if best >= iou_thresh => {
                used[*img][g] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// Build a class PR curve from per-image detections and ground truth.
pub fn pr_curve(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<SceneObject>],
    class: usize,
    iou_thresh: f64,
) -> Result<PrCurve> {
    let num_gt: usize = gts_per_image
        .iter()
        .map(|g| g.iter().filter(|o| o.class == class).count())
        .sum();
    if num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut dets: Vec<(usize, Detection)> = Vec::new();
    for (img, image_dets) in dets_per_image.iter().enumerate() {
        for d in image_dets {
            if d.class == class {
                dets.push((img, d.clone()));
            }
        }
    }
    // score-descending order; image then box order breaks ties
    dets.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let flags = match_detections(&dets, gts_per_image, class, iou_thresh);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for ((_, det), is_tp) in dets.iter().zip(&flags) {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            score: det.score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / num_gt as f64,
        });
    }
    Ok(PrCurve {
        class,
        points,
        num_gt,
    })
}

/// Area under the precision envelope: all-points interpolation where the
/// precision at recall r is the maximum precision at any recall >= r.
pub fn average_precision(curve: &PrCurve) -> Result<f64> {
    if curve.num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    if curve.points.is_empty() {
        return Ok(0.0);
    }
    let n = curve.points.len();
    let mut envelope = vec![0.0; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Unweighted mean over per-class APs.
pub fn mean_average_precision(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// Evaluation over a dataset: per-class AP (classes with ground truth only)
/// and their mean.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// (class, ap) for every class with at least one ground-truth instance.
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
    pub curves: Vec<PrCurve>,
}

pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<SceneObject>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<EvalResult> {
    let mut per_class = Vec::new();
    let mut curves = Vec::new();
    for class in 0..num_classes {
        match pr_curve(dets_per_image, gts_per_image, class, iou_thresh) {
            Ok(curve) => {
                let ap = average_precision(&curve)?;
                per_class.push((class, ap));
                curves.push(curve);
            }
            Err(Error::NoGroundTruth) => continue,
            Err(e) => return Err(e),
        }
    }
    let aps: Vec<f64> = per_class.iter().map(|&(_, ap)| ap).collect();
    Ok(EvalResult {
        map: mean_average_precision(&aps)?,
        per_class,
        curves,
    })
}

/// Write curves as `class,score,precision,recall` CSV rows.
pub fn write_pr_csv<W: Write>(out: &mut W, curves: &[PrCurve]) -> Result<()> {
    writeln!(out, "class,score,precision,recall")?;
    for curve in curves {
        for p in &curve.points {
            writeln!(out, "{},{},{},{}", curve.class, p.score, p.precision, p.recall)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Box2D;

    fn det(x: f64, y: f64, s: f64, class: usize, score: f64) -> Detection {
        Detection {
            bbox: Box2D::new(x, y, x + s, y + s).unwrap(),
            class,
            score,
        }
    }

    fn gt(x: f64, y: f64, s: f64, class: usize) -> SceneObject {
        SceneObject {
            class,
            bbox: Box2D::new(x, y, x + s, y + s).unwrap(),
        }
    }

    #[test]
    fn perfect_single_match_is_tp() {
        let dets = vec![vec![det(10.0, 10.0, 8.0, 0, 0.9)]];
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0)]];
        let curve = pr_curve(&dets, &gts, 0, MATCH_IOU).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.points[0].precision, 1.0);
        assert_eq!(curve.points[0].recall, 1.0);
        assert_eq!(average_precision(&curve).unwrap(), 1.0);
    }

    #[test]
    fn double_detection_counts_one_tp_one_fp() {
        let dets = vec![vec![det(10.0, 10.0, 8.0, 0, 0.9), det(10.5, 10.0, 8.0, 0, 0.8)]];
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0)]];
        let curve = pr_curve(&dets, &gts, 0, MATCH_IOU).unwrap();
        assert_eq!(curve.points[0].precision, 1.0);
        assert_eq!(curve.points[1].precision, 0.5);
        assert_eq!(curve.points[1].recall, 1.0);
    }

    #[test]
    fn hand_case_tp_fp_tp_over_two_gts() {
        // detections sorted by score: TP, FP, TP over 2 ground truths:
        // AP = (1.0 + 2/3) / 2
        let dets = vec![vec![
            det(10.0, 10.0, 8.0, 0, 0.9),
            det(40.0, 40.0, 8.0, 0, 0.8),
            det(10.0, 30.0, 8.0, 0, 0.7),
        ]];
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0), gt(10.0, 30.0, 8.0, 0)]];
        let curve = pr_curve(&dets, &gts, 0, MATCH_IOU).unwrap();
        let ap = average_precision(&curve).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_gives_zero_ap() {
        let dets = vec![Vec::new()];
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0)]];
        let curve = pr_curve(&dets, &gts, 0, MATCH_IOU).unwrap();
        assert_eq!(average_precision(&curve).unwrap(), 0.0);
    }

    #[test]
    fn no_ground_truth_is_error() {
        let dets = vec![vec![det(10.0, 10.0, 8.0, 0, 0.9)]];
        let gts = vec![Vec::new()];
        assert!(matches!(
            pr_curve(&dets, &gts, 0, MATCH_IOU),
            Err(Error::NoGroundTruth)
        ));
        assert!(matches!(mean_average_precision(&[]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn map_is_mean_over_classes_with_gt() {
        let dets = vec![vec![det(10.0, 10.0, 8.0, 0, 0.9), det(40.0, 40.0, 8.0, 1, 0.8)]];
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0), gt(20.0, 20.0, 8.0, 1)]];
        // class 0 perfect (AP 1), class 1 miss (AP 0), class 2 absent
        let result = evaluate(&dets, &gts, 3, MATCH_IOU).unwrap();
        assert_eq!(result.per_class.len(), 2);
        assert!((result.map - 0.5).abs() < 1e-12);

        let single = mean_average_precision(&[0.75]).unwrap();
        assert_eq!(single, 0.75);
    }

    #[test]
    fn ap_invariant_under_monotone_score_rescale() {
        let mk = |scores: [f64; 3]| {
            vec![vec![
                det(10.0, 10.0, 8.0, 0, scores[0]),
                det(40.0, 40.0, 8.0, 0, scores[1]),
                det(10.0, 30.0, 8.0, 0, scores[2]),
            ]]
        };
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0), gt(10.0, 30.0, 8.0, 0)]];
        let a = average_precision(&pr_curve(&mk([0.9, 0.8, 0.7]), &gts, 0, MATCH_IOU).unwrap()).unwrap();
        let b = average_precision(&pr_curve(&mk([0.5, 0.3, 0.1]), &gts, 0, MATCH_IOU).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_format() {
        let dets = vec![vec![det(10.0, 10.0, 8.0, 0, 0.9)]];
        let gts = vec![vec![gt(10.0, 10.0, 8.0, 0)]];
        let result = evaluate(&dets, &gts, 1, MATCH_IOU).unwrap();
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &result.curves).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,score,precision,recall\n"));
        assert!(text.contains("0,0.9,1,1"));
    }
}

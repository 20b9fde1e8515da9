//! Pedestrian-detection evaluation: greedy IoU matching with ignore
//! regions, the miss-rate/FPPI curve, its log average over
//! [1e-2, 1e0], AP50, and occlusion-based test subsets.

use serde::{Deserialize, Serialize};

use crate::annotation::{Detection, GTAnnotation};
use crate::bbox::iou;
use crate::error::{CoreError, Result};

/// Samples with miss rate equal to zero are floored here before taking
/// logs, so the geometric mean stays finite. Reports disclose the floor.
pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// Default IoU threshold for detection-to-GT matching.
pub const DEFAULT_IOU_THR: f64 = 0.5;

/// Number of FPPI reference points for the log-average miss rate.
pub const DEFAULT_MR_SAMPLES: usize = 9;

/// A named ground-truth subset selected by occlusion fraction and,
/// optionally, a minimum box height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSubset {
    pub name: String,
    pub occ_min: f64,
    pub occ_max: f64,
    pub min_inclusive: bool,
    pub max_inclusive: bool,
    pub min_height: Option<f64>,
}

impl OcclusionSubset {
    /// occlusion in [0, 0.35) and height >= `min_height` (50 px by the
    /// usual convention; desk-scale configs lower it).
    pub fn reasonable(min_height: f64) -> Self {
        OcclusionSubset {
            name: "reasonable".into(),
            occ_min: 0.0,
            occ_max: 0.35,
            min_inclusive: true,
            max_inclusive: false,
            min_height: Some(min_height),
        }
    }

    /// occlusion in [0, 0.10]
    pub fn bare() -> Self {
        OcclusionSubset {
            name: "bare".into(),
            occ_min: 0.0,
            occ_max: 0.10,
            min_inclusive: true,
            max_inclusive: true,
            min_height: None,
        }
    }

    /// occlusion in (0.10, 0.35]
    pub fn partial() -> Self {
        OcclusionSubset {
            name: "partial".into(),
            occ_min: 0.10,
            occ_max: 0.35,
            min_inclusive: false,
            max_inclusive: true,
            min_height: None,
        }
    }

    /// occlusion in (0.35, 0.80]
    pub fn heavy() -> Self {
        OcclusionSubset {
            name: "heavy".into(),
            occ_min: 0.35,
            occ_max: 0.80,
            min_inclusive: false,
            max_inclusive: true,
            min_height: None,
        }
    }

    pub fn standard_four(reasonable_min_height: f64) -> Vec<Self> {
        vec![
            Self::reasonable(reasonable_min_height),
            Self::bare(),
            Self::partial(),
            Self::heavy(),
        ]
    }

    pub fn contains(&self, gt: &GTAnnotation) -> bool {
        let lo_ok = if self.min_inclusive {
            gt.occlusion >= self.occ_min
        } else {
            gt.occlusion > self.occ_min
        };
        let hi_ok = if self.max_inclusive {
            gt.occlusion <= self.occ_max
        } else {
            gt.occlusion < self.occ_max
        };
        let height_ok = self.min_height.is_none_or(|h| gt.bbox.h >= h);
        lo_ok && hi_ok && height_ok
    }
}

/// Mark ground truth outside the subset as ignore instead of deleting it,
/// so detections on out-of-subset pedestrians are discarded rather than
/// counted as false positives.
pub fn filter_subset(gts: &[GTAnnotation], subset: &OcclusionSubset) -> Vec<GTAnnotation> {
    gts.iter()
        .map(|gt| {
            let mut gt = gt.clone();
            if !subset.contains(&gt) {
                gt.ignore = true;
            }
            gt
        })
        .collect()
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    /// Matched the ground truth with this index.
    TruePositive(usize),
    FalsePositive,
    /// Overlapped only ignore ground truth; dropped from the tally.
    Ignored,
}

/// Matching result for one image.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// (score, outcome) per detection, sorted by descending score
    /// (ties keep input order).
    pub detections: Vec<(f64, DetOutcome)>,
    /// Number of ground-truth boxes that count (non-ignore).
    pub num_gt: usize,
}

/// Greedy IoU matching of detections to ground truth.
///
/// Detections are visited in order of descending score (ties broken by
/// input order) and match the unmatched non-ignore GT of highest IoU at or
/// above `iou_thr`. Detections whose only qualifying overlap is ignore
/// ground truth are discarded; everything else unmatched is a false
/// positive.
pub fn match_detections(dets: &[Detection], gts: &[GTAnnotation], iou_thr: f64) -> Result<MatchResult> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(CoreError::invalid(format!("iou threshold {iou_thr} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));

    let mut gt_taken = vec![false; gts.len()];
    let mut detections = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.ignore || gt_taken[gi] {
                continue;
            }
            let ov = iou(&det.bbox, &gt.bbox);
            if ov >= iou_thr && best.is_none_or(|(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        let outcome = match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                DetOutcome::TruePositive(gi)
            }
            None => {
                let on_ignore = gts
                    .iter()
                    .any(|gt| gt.ignore && iou(&det.bbox, &gt.bbox) >= iou_thr);
                if on_ignore {
                    DetOutcome::Ignored
                } else {
                    DetOutcome::FalsePositive
                }
            }
        };
        detections.push((det.score, outcome));
    }
    let num_gt = gts.iter().filter(|g| !g.ignore).count();
    Ok(MatchResult { detections, num_gt })
}

/// Miss rate versus false positives per image, one point per distinct
/// score threshold, sorted by ascending FPPI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FppiCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweep the score threshold over every distinct detection score and emit
/// (FP count / num_images, missed GT / total GT) at each threshold.
pub fn fppi_curve(per_image: &[MatchResult], num_images: usize) -> Result<FppiCurve> {
    if num_images == 0 {
        return Err(CoreError::invalid("num_images must be >= 1"));
    }
    let total_gt: usize = per_image.iter().map(|m| m.num_gt).sum();
    if total_gt == 0 {
        return Err(CoreError::eval("no non-ignored ground truth; miss rate undefined"));
    }

    let mut records: Vec<(f64, bool)> = Vec::new(); // (score, is_tp)
    for m in per_image {
        for &(score, outcome) in &m.detections {
            match outcome {
                DetOutcome::TruePositive(_) => records.push((score, true)),
                DetOutcome::FalsePositive => records.push((score, false)),
                DetOutcome::Ignored => {}
            }
        }
    }
    if records.is_empty() {
        return Ok(FppiCurve { points: vec![(0.0, 1.0)] });
    }
    records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < records.len() {
        let thr = records[i].0;
        // consume every record tied at this threshold
        while i < records.len() && records[i].0 == thr {
            if records[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fppi = fp as f64 / num_images as f64;
        let miss = (total_gt - tp) as f64 / total_gt as f64;
        points.push((fppi, miss));
    }
    // descending threshold gives ascending FPPI already
    Ok(FppiCurve { points })
}

/// Log-average miss rate over FPPI reference points log-spaced in
/// [1e-2, 1e0].
///
/// Each reference point samples the miss rate of the largest curve FPPI
/// at or below it (1.0 when the curve starts above it); zeros are floored
/// at [`MISS_RATE_FLOOR`] before the geometric mean.
pub fn log_avg_miss_rate(curve: &FppiCurve) -> Result<f64> {
    log_avg_miss_rate_n(curve, DEFAULT_MR_SAMPLES)
}

pub fn log_avg_miss_rate_n(curve: &FppiCurve, samples: usize) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(CoreError::invalid("empty FPPI curve"));
    }
    if samples < 2 {
        return Err(CoreError::invalid("need at least 2 reference points"));
    }
    let mut log_sum = 0.0;
    for k in 0..samples {
        let f_ref = 10f64.powf(-2.0 + 2.0 * k as f64 / (samples - 1) as f64);
        let mut sampled = 1.0;
        for &(fppi, miss) in &curve.points {
            if fppi <= f_ref {
                sampled = miss;
            } else {
                break;
            }
        }
        log_sum += sampled.max(MISS_RATE_FLOOR).ln();
    }
    Ok((log_sum / samples as f64).exp())
}

/// Average precision at IoU 0.5 with the all-points (precision envelope)
/// interpolation.
pub fn ap50(per_image: &[MatchResult]) -> Result<f64> {
    let total_gt: usize = per_image.iter().map(|m| m.num_gt).sum();
    if total_gt == 0 {
        return Err(CoreError::eval("no non-ignored ground truth; AP undefined"));
    }
    let mut records: Vec<(f64, bool)> = Vec::new();
    for m in per_image {
        for &(score, outcome) in &m.detections {
            match outcome {
                DetOutcome::TruePositive(_) => records.push((score, true)),
                DetOutcome::FalsePositive => records.push((score, false)),
                DetOutcome::Ignored => {}
            }
        }
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut precisions = Vec::with_capacity(records.len());
    let mut recalls = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in records.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    // precision envelope: max precision at this recall or beyond
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..records.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    Ok(ap)
}

/// Aggregate evaluation output: MR^-2 per occlusion subset (None when
/// occlusion data is absent), AP50, the full-set FPPI curve and counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub subsets: Vec<SubsetResult>,
    pub ap50: f64,
    pub curve: FppiCurve,
    pub counts: EvalCounts,
    pub miss_rate_floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetResult {
    pub name: String,
    pub mr2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gt: usize,
    pub det: usize,
    pub tp: usize,
    pub fp: usize,
}

/// One evaluation sample: the detections and ground truth of one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub gts: Vec<GTAnnotation>,
    /// False when the dataset carries no occlusion labels; subsets other
    /// than the height-only ones are then reported as null.
    pub has_occlusion: bool,
}

/// Run the full protocol: per-subset MR^-2 plus AP50 and the FPPI curve
/// on unfiltered ground truth.
pub fn evaluate(images: &[ImageEval], subsets: &[OcclusionSubset], iou_thr: f64) -> Result<EvalReport> {
    let num_images = images.len().max(1);
    let base: Vec<MatchResult> = images
        .iter()
        .map(|img| match_detections(&img.detections, &img.gts, iou_thr))
        .collect::<Result<_>>()?;

    let curve = fppi_curve(&base, num_images)?;
    let ap = ap50(&base)?;

    let mut counts = EvalCounts { gt: 0, det: 0, tp: 0, fp: 0 };
    for m in &base {
        counts.gt += m.num_gt;
        for &(_, outcome) in &m.detections {
            match outcome {
                DetOutcome::TruePositive(_) => {
                    counts.tp += 1;
                    counts.det += 1;
                }
                DetOutcome::FalsePositive => {
                    counts.fp += 1;
                    counts.det += 1;
                }
                DetOutcome::Ignored => counts.det += 1,
            }
        }
    }

    let occlusion_known = images.iter().all(|img| img.has_occlusion);
    let mut subset_results = Vec::new();
    for subset in subsets {
        // Without occlusion labels every GT counts as unoccluded, so only
        // subsets that admit occlusion 0 stay reportable.
        let works_without_occ = subset.occ_min == 0.0 && subset.min_inclusive;
        if !occlusion_known && !works_without_occ {
            subset_results.push(SubsetResult { name: subset.name.clone(), mr2: None });
            continue;
        }
        let matches: Vec<MatchResult> = images
            .iter()
            .map(|img| {
                let gts = filter_subset(&img.gts, subset);
                match_detections(&img.detections, &gts, iou_thr)
            })
            .collect::<Result<_>>()?;
        let mr2 = match fppi_curve(&matches, num_images) {
            Ok(c) => Some(log_avg_miss_rate(&c)?),
            Err(CoreError::Evaluation(_)) => None, // subset empty on this data
            Err(e) => return Err(e),
        };
        subset_results.push(SubsetResult { name: subset.name.clone(), mr2 });
    }

    Ok(EvalReport {
        subsets: subset_results,
        ap50: ap,
        curve,
        counts,
        miss_rate_floor: MISS_RATE_FLOOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::{BBox, DomainLabel};
    use approx::assert_abs_diff_eq;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection::new(BBox::new(x, y, w, h).unwrap(), score).unwrap()
    }

    fn gt(x: f64, y: f64, w: f64, h: f64) -> GTAnnotation {
        GTAnnotation::new(BBox::new(x, y, w, h).unwrap(), 0.0, false, DomainLabel::Source).unwrap()
    }

    fn gt_occ(x: f64, y: f64, w: f64, h: f64, occ: f64) -> GTAnnotation {
        GTAnnotation::new(BBox::new(x, y, w, h).unwrap(), occ, false, DomainLabel::Source).unwrap()
    }

    #[test]
    fn exact_match_is_tp() {
        let m = match_detections(&[det(0.0, 0.0, 10.0, 10.0, 0.9)], &[gt(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        assert_eq!(m.detections, vec![(0.9, DetOutcome::TruePositive(0))]);
        assert_eq!(m.num_gt, 1);
    }

    #[test]
    fn ignore_gt_swallows_detection() {
        let mut g = gt(0.0, 0.0, 10.0, 10.0);
        g.ignore = true;
        let m = match_detections(&[det(0.0, 0.0, 10.0, 10.0, 0.9)], &[g], 0.5).unwrap();
        assert_eq!(m.detections, vec![(0.9, DetOutcome::Ignored)]);
        assert_eq!(m.num_gt, 0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let dets = [det(0.0, 0.0, 10.0, 10.0, 0.9), det(1.0, 0.0, 10.0, 10.0, 0.8)];
        let m = match_detections(&dets, &[gt(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        assert_eq!(
            m.detections,
            vec![(0.9, DetOutcome::TruePositive(0)), (0.8, DetOutcome::FalsePositive)]
        );
    }

    #[test]
    fn perfect_detection_curve() {
        let m = match_detections(&[det(0.0, 0.0, 10.0, 10.0, 1.0)], &[gt(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        let c = fppi_curve(&[m], 1).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0)]);
    }

    #[test]
    fn no_detection_curve() {
        let m = match_detections(&[], &[gt(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        let c = fppi_curve(&[m], 1).unwrap();
        assert_eq!(c.points, vec![(0.0, 1.0)]);
    }

    #[test]
    fn zero_gt_is_an_error() {
        let m = match_detections(&[det(0.0, 0.0, 4.0, 4.0, 0.5)], &[], 0.5).unwrap();
        assert!(matches!(fppi_curve(&[m], 1), Err(CoreError::Evaluation(_))));
    }

    #[test]
    fn blind_detector_scores_one() {
        let m = match_detections(&[], &[gt(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        let c = fppi_curve(&[m], 1).unwrap();
        assert_abs_diff_eq!(log_avg_miss_rate(&c).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_detector_hits_floor() {
        let m = match_detections(&[det(0.0, 0.0, 10.0, 10.0, 1.0)], &[gt(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        let c = fppi_curve(&[m], 1).unwrap();
        assert_abs_diff_eq!(log_avg_miss_rate(&c).unwrap(), MISS_RATE_FLOOR, epsilon = 1e-22);
    }

    #[test]
    fn log_avg_against_hand_sampling() {
        let curve = FppiCurve {
            points: vec![(0.005, 0.4), (0.1, 0.2), (1.0, 0.1)],
        };
        // oracle: sample the step function at the nine reference points
        let mut logs = Vec::new();
        for k in 0..9 {
            let f = 10f64.powf(-2.0 + k as f64 / 4.0);
            let sample = if f < 0.005 {
                1.0
            } else if f < 0.1 {
                0.4
            } else if f < 1.0 {
                0.2
            } else {
                0.1
            };
            logs.push(f64::ln(sample));
        }
        let expected = (logs.iter().sum::<f64>() / 9.0).exp();
        assert_abs_diff_eq!(log_avg_miss_rate(&curve).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn ap_hand_example() {
        // 2 GT; det order by score: TP, FP, TP -> AP = 0.5*1 + 0.5*(2/3)
        let gts = [gt(0.0, 0.0, 10.0, 10.0), gt(50.0, 50.0, 10.0, 10.0)];
        let dets = [
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(100.0, 100.0, 10.0, 10.0, 0.8),
            det(50.0, 50.0, 10.0, 10.0, 0.7),
        ];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        let ap = ap50(&[m]).unwrap();
        assert_abs_diff_eq!(ap, 0.5 + 0.5 * (2.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts = [gt(0.0, 0.0, 10.0, 10.0)];
        let m = match_detections(&[det(0.0, 0.0, 10.0, 10.0, 0.9)], &gts, 0.5).unwrap();
        assert_abs_diff_eq!(ap50(&[m]).unwrap(), 1.0, epsilon = 1e-12);
        let m = match_detections(&[], &gts, 0.5).unwrap();
        assert_abs_diff_eq!(ap50(&[m]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn subset_assignment_follows_thresholds() {
        let subsets = OcclusionSubset::standard_four(50.0);
        let visible = gt_occ(0.0, 0.0, 20.0, 60.0, 0.0);
        let half = gt_occ(0.0, 0.0, 20.0, 60.0, 0.5);
        let short = gt_occ(0.0, 0.0, 10.0, 30.0, 0.0);

        let reasonable = &subsets[0];
        assert!(reasonable.contains(&visible));
        assert!(!reasonable.contains(&half));
        assert!(!reasonable.contains(&short));

        let heavy = &subsets[3];
        assert!(heavy.contains(&half));
        assert!(!heavy.contains(&visible));

        let filtered = filter_subset(&[visible.clone(), half.clone()], reasonable);
        assert!(!filtered[0].ignore);
        assert!(filtered[1].ignore);
    }

    #[test]
    fn curve_is_monotone() {
        let gts = [gt(0.0, 0.0, 10.0, 10.0), gt(30.0, 0.0, 10.0, 10.0)];
        let dets = [
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(60.0, 60.0, 5.0, 5.0, 0.6),
            det(30.0, 0.0, 10.0, 10.0, 0.4),
            det(80.0, 80.0, 5.0, 5.0, 0.2),
        ];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        let c = fppi_curve(&[m], 1).unwrap();
        for win in c.points.windows(2) {
            assert!(win[0].0 <= win[1].0, "fppi not ascending");
            assert!(win[0].1 >= win[1].1, "miss rate not descending with fppi");
        }
    }
}

//! Average Viewpoint Precision: a detection counts as correct only when its
//! box overlaps an unclaimed ground truth AND its viewpoint bin matches.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::aggregate::{iou, BoundingBox};
use crate::viewgeom::{AzimuthDeg, BinIndex, BinScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub azimuth: AzimuthDeg,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub predicted_bin: BinIndex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvpOptions {
    pub iou_threshold: f64,
    pub bins: BinScheme,
    /// A box match with the wrong bin still claims the ground truth.
    pub wrong_bin_consumes: bool,
    /// Drop the viewpoint condition (plain detection AP).
    pub ignore_viewpoint: bool,
}

impl Default for AvpOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            bins: BinScheme::default(),
            wrong_bin_consumes: true,
            ignore_viewpoint: false,
        }
    }
}

/// Verdict for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive { gt: usize },
    /// Box matched `gt` but the bin was wrong.
    WrongBin { gt: usize },
    FalsePositive,
    /// Matched a difficult ground truth; excluded from the curve.
    Ignored,
}

impl Outcome {
    pub fn is_tp(self) -> bool {
        matches!(self, Outcome::TruePositive { .. })
    }
}

/// Viewpoint precision/recall curve and the area under its precision envelope.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VprCurve {
    /// `(recall, precision)` after each counted prediction, by descending confidence.
    pub points: Vec<(f64, f64)>,
    pub avp: f64,
    /// Set when there was no non-difficult ground truth to recall.
    pub empty_ground_truth: bool,
}

/// Prediction indices sorted by descending confidence, ties in input order.
pub fn confidence_order(preds: &[ScoredPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// Greedy matching in confidence order. Returns `(prediction index, outcome)`
/// pairs in the order they were visited.
pub fn match_predictions(
    preds: &[ScoredPrediction],
    gts: &[GroundTruthObject],
    opts: &AvpOptions,
) -> Vec<(usize, Outcome)> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let gt_bins: Vec<BinIndex> = gts.iter().map(|g| opts.bins.azimuth_to_bin(g.azimuth)).collect();
    let mut claimed = vec![false; gts.len()];

    confidence_order(preds)
        .into_iter()
        .map(|pi| {
            let p = &preds[pi];
            let mut best: Option<(usize, f64)> = None;
            for &gi in by_image.get(p.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if claimed[gi] {
                    continue;
                }
                let o = iou(&p.bbox, &gts[gi].bbox);
                if o >= opts.iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            let outcome = match best {
                None => Outcome::FalsePositive,
                Some((gi, _)) if gts[gi].difficult => Outcome::Ignored,
                Some((gi, _)) if opts.ignore_viewpoint || gt_bins[gi] == p.predicted_bin => {
                    claimed[gi] = true;
                    Outcome::TruePositive { gt: gi }
                }
                Some((gi, _)) => {
                    if opts.wrong_bin_consumes {
                        claimed[gi] = true;
                    }
                    Outcome::WrongBin { gt: gi }
                }
            };
            (pi, outcome)
        })
        .collect()
}

/// Area under the monotone precision envelope (all-points interpolation).
pub fn envelope_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), p) in points.iter().zip(&envelope) {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}

/// Scores one class: predictions and ground truth must already be filtered to it.
pub fn match_and_score(preds: &[ScoredPrediction], gts: &[GroundTruthObject], opts: &AvpOptions) -> VprCurve {
    let positives = gts.iter().filter(|g| !g.difficult).count();
    if positives == 0 {
        return VprCurve {
            points: Vec::new(),
            avp: 0.0,
            empty_ground_truth: true,
        };
    }
    let mut tp = 0usize;
    let mut counted = 0usize;
    let mut points = Vec::new();
    for (_, outcome) in match_predictions(preds, gts, opts) {
        if outcome == Outcome::Ignored {
            continue;
        }
        counted += 1;
        if outcome.is_tp() {
            tp += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / counted as f64));
    }
    VprCurve {
        avp: envelope_area(&points),
        points,
        empty_ground_truth: false,
    }
}

/// Per-class curves over a mixed-class evaluation set; classes are scored in
/// parallel.
pub fn evaluate_classes(
    preds: &[ScoredPrediction],
    gts: &[GroundTruthObject],
    opts: &AvpOptions,
) -> BTreeMap<u32, VprCurve> {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class_id).chain(preds.iter().map(|p| p.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    std::thread::scope(|scope| {
        let handles: Vec<_> = classes
            .iter()
            .map(|&c| {
                scope.spawn(move || {
                    let p: Vec<ScoredPrediction> = preds.iter().filter(|x| x.class_id == c).cloned().collect();
                    let g: Vec<GroundTruthObject> = gts.iter().filter(|x| x.class_id == c).cloned().collect();
                    (c, match_and_score(&p, &g, opts))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("class scoring panicked")).collect()
    })
}

/// Unweighted mean of per-class AVP values; zero for an empty slice.
pub fn mean_avp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, 10.0, 10.0).unwrap()
    }

    fn gt(img: &str, x: f64, az: f64) -> GroundTruthObject {
        GroundTruthObject {
            image_id: img.into(),
            class_id: 0,
            bbox: bx(x),
            azimuth: AzimuthDeg::new(az),
            difficult: false,
        }
    }

    fn pred(img: &str, x: f64, conf: f64, bin: usize) -> ScoredPrediction {
        ScoredPrediction {
            image_id: img.into(),
            class_id: 0,
            bbox: bx(x),
            confidence: conf,
            predicted_bin: BinIndex(bin),
        }
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![gt("a", 0.0, 0.0), gt("a", 100.0, 90.0), gt("b", 0.0, 180.0)];
        let preds = vec![pred("a", 0.0, 0.9, 0), pred("a", 100.0, 0.8, 6), pred("b", 0.0, 0.7, 12)];
        let c = match_and_score(&preds, &gts, &AvpOptions::default());
        assert_eq!(c.avp, 1.0);
    }

    #[test]
    fn wrong_bins_everywhere() {
        let gts = vec![gt("a", 0.0, 0.0), gt("b", 0.0, 180.0)];
        let preds = vec![pred("a", 0.0, 0.9, 3), pred("b", 0.0, 0.7, 4)];
        let c = match_and_score(&preds, &gts, &AvpOptions::default());
        assert_eq!(c.avp, 0.0);
        let ap = match_and_score(
            &preds,
            &gts,
            &AvpOptions {
                ignore_viewpoint: true,
                ..Default::default()
            },
        );
        assert_eq!(ap.avp, 1.0);
    }

    #[test]
    fn tp_wrongbin_tp_staircase() {
        // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> envelope area 1/2 + 1/2 * 2/3
        let gts = vec![gt("a", 0.0, 0.0), gt("a", 100.0, 90.0)];
        let preds = vec![pred("a", 0.0, 0.9, 0), pred("a", 1.0, 0.8, 5), pred("a", 100.0, 0.7, 6)];
        let c = match_and_score(&preds, &gts, &AvpOptions::default());
        assert_eq!(c.points, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        assert!((c.avp - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn wrong_bin_consumption_switch() {
        let gts = vec![gt("a", 0.0, 0.0)];
        let preds = vec![pred("a", 0.0, 0.9, 7), pred("a", 0.0, 0.8, 0)];
        let consume = match_and_score(&preds, &gts, &AvpOptions::default());
        assert_eq!(consume.avp, 0.0);
        let keep = match_and_score(
            &preds,
            &gts,
            &AvpOptions {
                wrong_bin_consumes: false,
                ..Default::default()
            },
        );
        assert!((keep.avp - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicates_yield_one_tp() {
        let gts = vec![gt("a", 0.0, 45.0)];
        let preds: Vec<_> = (0..5).map(|i| pred("a", 0.0, 0.9 - i as f64 * 0.1, 3)).collect();
        let out = match_predictions(&preds, &gts, &AvpOptions::default());
        assert_eq!(out.iter().filter(|(_, o)| o.is_tp()).count(), 1);
        assert_eq!(out.iter().filter(|(_, o)| *o == Outcome::FalsePositive).count(), 4);
    }

    #[test]
    fn difficult_ground_truth_is_neutral() {
        let mut hard = gt("a", 100.0, 0.0);
        hard.difficult = true;
        let gts = vec![gt("a", 0.0, 0.0), hard];
        let preds = vec![pred("a", 100.0, 0.9, 0), pred("a", 0.0, 0.8, 0)];
        let c = match_and_score(&preds, &gts, &AvpOptions::default());
        assert_eq!(c.points, vec![(1.0, 1.0)]);
        assert_eq!(c.avp, 1.0);
    }

    #[test]
    fn empty_ground_truth_flagged() {
        let c = match_and_score(&[pred("a", 0.0, 0.5, 0)], &[], &AvpOptions::default());
        assert!(c.empty_ground_truth);
        assert_eq!(c.avp, 0.0);
    }

    #[test]
    fn iou_threshold_is_inclusive() {
        // overlap 5/15 = 1/3
        let gts = vec![gt("a", 0.0, 0.0)];
        let preds = vec![pred("a", 5.0, 0.9, 0)];
        let opts = AvpOptions {
            iou_threshold: 1.0 / 3.0,
            ..Default::default()
        };
        assert_eq!(match_and_score(&preds, &gts, &opts).avp, 1.0);
        assert_eq!(match_and_score(&preds, &gts, &AvpOptions::default()).avp, 0.0);
    }

    #[test]
    fn other_images_do_not_match() {
        let gts = vec![gt("a", 0.0, 0.0)];
        let preds = vec![pred("b", 0.0, 0.9, 0)];
        assert_eq!(match_and_score(&preds, &gts, &AvpOptions::default()).avp, 0.0);
    }

    #[test]
    fn mean_avp_examples() {
        assert_eq!(mean_avp(&[0.5]), 0.5);
        assert_eq!(mean_avp(&[1.0, 0.0]), 0.5);
        let table = [47.7, 42.5, 23.8, 74.8, 54.7, 25.9, 42.8, 43.5, 46.3, 54.6, 47.9];
        let m = mean_avp(&table);
        assert!((m - 45.9).abs() <= 0.05, "{m}");
        assert!((m - 504.5 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn per_class_evaluation() {
        let mut g1 = gt("a", 0.0, 0.0);
        g1.class_id = 1;
        let mut p1 = pred("a", 0.0, 0.5, 5);
        p1.class_id = 1;
        let gts = vec![gt("a", 0.0, 0.0), g1];
        let preds = vec![pred("a", 0.0, 0.9, 0), p1];
        let curves = evaluate_classes(&preds, &gts, &AvpOptions::default());
        assert_eq!(curves[&0].avp, 1.0);
        assert_eq!(curves[&1].avp, 0.0);
    }
}

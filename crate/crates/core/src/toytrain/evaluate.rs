//! Runs a trained toy model through aggregation and AVP scoring with
//! synthesized boxes of controlled overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_detections, select_bin_integral, select_bin_max_activation, BoundingBox, Detection};
use crate::avp::{match_and_score, AvpOptions, GroundTruthObject, ScoredPrediction, VprCurve};
use crate::error::{Error, Result};
use crate::viewgeom::{BinIndex, BinScheme};

use super::model::ToyModel;
use super::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinSelection {
    Integral,
    MaxActivation,
}

/// How predicted boxes are placed relative to the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionJitter {
    /// Exact IoU between each prediction and its ground-truth box, in `(0, 1]`.
    pub iou: f64,
    /// Classification score attached to every prediction.
    pub class_score: f64,
    pub seed: u64,
}

impl Default for DetectionJitter {
    fn default() -> Self {
        Self {
            iou: 1.0,
            class_score: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEvaluation {
    pub class_id: u32,
    pub avp: f64,
    /// Fraction of samples whose selected bin equals the ground-truth bin.
    pub bin_accuracy: f64,
    pub samples: usize,
    pub curve: VprCurve,
}

/// Same-size box shifted sideways so that its IoU with `gt` is exactly `iou`.
fn shifted_box(gt: &BoundingBox, iou: f64) -> BoundingBox {
    // (w - dx) / (w + dx) = iou
    let dx = gt.w * (1.0 - iou) / (1.0 + iou);
    BoundingBox { x: gt.x + dx, ..*gt }
}

/// Ground-truth box of a sample; depends only on `seed` and the sample id.
pub fn ground_truth_box(sample_id: u64, seed: u64) -> BoundingBox {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    BoundingBox {
        x: rng.random_range(0.0..400.0),
        y: rng.random_range(0.0..300.0),
        w: rng.random_range(20.0..200.0),
        h: rng.random_range(20.0..200.0),
    }
}

/// One prediction for one image, before bin selection is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPrediction {
    pub bbox: BoundingBox,
    /// Fused viewpoint score of the detection group.
    pub score: Vec<f64>,
    pub bin: BinIndex,
    /// Mass of the selected bin times the class score.
    pub confidence: f64,
}

/// Runs the model on one image and turns its output into a scored detection.
pub fn predict_sample(
    model: &ToyModel,
    features: &[f64],
    class_id: u32,
    gt_box: &BoundingBox,
    jitter: &DetectionJitter,
    selection: BinSelection,
    bins: &BinScheme,
) -> Result<ToyPrediction> {
    if !(jitter.iou > 0.0 && jitter.iou <= 1.0) {
        return Err(Error::OutOfRange(format!("jitter IoU must lie in (0, 1], got {}", jitter.iou)));
    }
    let det = Detection {
        bbox: shifted_box(gt_box, jitter.iou),
        class_id,
        class_score: jitter.class_score,
        viewpoint: model.forward(features)?.distribution,
    };
    let fused = aggregate_detections(std::slice::from_ref(&det), 0.5)
        .pop()
        .expect("one detection forms one group");
    let (integral_bin, mass) = select_bin_integral(&fused.score, bins)?;
    let bin = match selection {
        BinSelection::Integral => integral_bin,
        BinSelection::MaxActivation => select_bin_max_activation(&fused.score, bins)?,
    };
    Ok(ToyPrediction {
        bbox: fused.bbox,
        confidence: mass * fused.class_score,
        score: fused.score,
        bin,
    })
}

/// Scores every sample of `test` in `class_id` as a one-detection image.
pub fn evaluate_toy(
    model: &ToyModel,
    test: &Dataset,
    class_id: u32,
    jitter: &DetectionJitter,
    selection: BinSelection,
    opts: &AvpOptions,
) -> Result<ToyEvaluation> {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut correct = 0usize;
    for s in test.samples.iter().filter(|s| s.class_id == class_id) {
        let image_id = format!("toy{:06}", s.id);
        let gt_box = ground_truth_box(s.id, jitter.seed);
        let p = predict_sample(model, &s.features, class_id, &gt_box, jitter, selection, &opts.bins)?;
        if p.bin == opts.bins.azimuth_to_bin(s.azimuth) {
            correct += 1;
        }
        gts.push(GroundTruthObject {
            image_id: image_id.clone(),
            class_id,
            bbox: gt_box,
            azimuth: s.azimuth,
            difficult: false,
        });
        preds.push(ScoredPrediction {
            image_id,
            class_id,
            bbox: p.bbox,
            confidence: p.confidence,
            predicted_bin: p.bin,
        });
    }
    let n = gts.len();
    let curve = match_and_score(&preds, &gts, opts);
    Ok(ToyEvaluation {
        class_id,
        avp: curve.avp,
        bin_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        samples: n,
        curve,
    })
}

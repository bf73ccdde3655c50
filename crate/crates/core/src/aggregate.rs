//! Grouping of overlapping detections and score-weighted viewpoint fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::viewgeom::{BinIndex, BinScheme, ClassIndex, ViewpointDistribution, NUM_CLASSES};

/// Axis-aligned box, top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::OutOfRange(format!("invalid box [{x}, {y}, {w}, {h}]")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: u32,
    /// Classification score in `[0, 1]`.
    pub class_score: f64,
    /// Normalized viewpoint distribution of this box.
    pub viewpoint: ViewpointDistribution,
}

/// Indices into the detection list; the first is the representative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub members: Vec<usize>,
}

impl Group {
    pub fn representative(&self) -> usize {
        self.members[0]
    }
}

/// Greedy non-maximum grouping of same-class detections.
///
/// Detections are visited by descending class score (ties keep input order);
/// each unassigned detection opens a group and absorbs every unassigned
/// detection whose IoU with it exceeds `threshold`.
pub fn group_detections(dets: &[Detection], threshold: f64) -> Vec<Group> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].class_score.total_cmp(&dets[a].class_score));
    let mut taken = vec![false; dets.len()];
    let mut groups = Vec::new();
    for (pos, &lead) in order.iter().enumerate() {
        if taken[lead] {
            continue;
        }
        taken[lead] = true;
        let mut members = vec![lead];
        for &other in &order[pos + 1..] {
            if !taken[other] && iou(&dets[lead].bbox, &dets[other].bbox) > threshold {
                taken[other] = true;
                members.push(other);
            }
        }
        groups.push(Group { members });
    }
    groups
}

/// A representative box with its summed, score-weighted viewpoint vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDetection {
    pub bbox: BoundingBox,
    pub class_id: u32,
    /// Class score of the representative.
    pub class_score: f64,
    pub score: Vec<f64>,
    pub member_count: usize,
}

impl FusedDetection {
    /// Unit-mass copy of the score, for display only.
    pub fn normalized_view(&self) -> Option<ViewpointDistribution> {
        ViewpointDistribution::new(self.score.clone()).ok()?.normalized()
    }

    /// Total score mass per bin.
    pub fn bin_masses(&self, scheme: &BinScheme) -> Vec<f64> {
        bin_masses(&self.score, scheme)
    }
}

pub fn bin_masses(score: &[f64], scheme: &BinScheme) -> Vec<f64> {
    let table = scheme.class_table();
    let mut masses = vec![0.0; scheme.count];
    for (k, s) in score.iter().enumerate() {
        masses[table[k]] += s;
    }
    masses
}

/// Sums `P_A(bb_i) * P_C(bb_i)` over the members of a group.
pub fn fuse_group(dets: &[Detection], group: &Group) -> Result<FusedDetection> {
    let lead = *group.members.first().ok_or(Error::EmptyGroup)?;
    // terms are summed in sorted order so member order cannot change a bit
    let mut terms = Vec::with_capacity(group.members.len());
    let score = (0..NUM_CLASSES)
        .map(|k| {
            terms.clear();
            terms.extend(group.members.iter().map(|&i| dets[i].viewpoint.as_slice()[k] * dets[i].class_score));
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect();
    Ok(FusedDetection {
        bbox: dets[lead].bbox,
        class_id: dets[lead].class_id,
        class_score: dets[lead].class_score,
        score,
        member_count: group.members.len(),
    })
}

/// Groups detections per class and fuses every group.
pub fn aggregate_detections(dets: &[Detection], threshold: f64) -> Vec<FusedDetection> {
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class in classes {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
        let subset: Vec<Detection> = idx.iter().map(|&i| dets[i].clone()).collect();
        for g in group_detections(&subset, threshold) {
            out.push(fuse_group(&subset, &g).expect("groups are nonempty"));
        }
    }
    out
}

fn ensure_positive(score: &[f64]) -> Result<()> {
    if score.iter().any(|&s| s > 0.0) {
        Ok(())
    } else {
        Err(Error::AllZeroScore)
    }
}

/// Bin with the largest summed score; lowest bin wins ties. Also returns its mass.
pub fn select_bin_integral(score: &[f64], scheme: &BinScheme) -> Result<(BinIndex, f64)> {
    ensure_positive(score)?;
    let masses = bin_masses(score, scheme);
    let mut best = 0;
    for (b, &m) in masses.iter().enumerate() {
        if m > masses[best] {
            best = b;
        }
    }
    Ok((BinIndex(best), masses[best]))
}

/// Bin containing the single strongest class; lowest class wins ties.
pub fn select_bin_max_activation(score: &[f64], scheme: &BinScheme) -> Result<BinIndex> {
    ensure_positive(score)?;
    let mut best = 0;
    for (k, &s) in score.iter().enumerate() {
        if s > score[best] {
            best = k;
        }
    }
    Ok(scheme.class_to_bin(ClassIndex::new(best)?))
}

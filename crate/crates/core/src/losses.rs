//! Viewpoint loss kernels with analytic gradients.
//!
//! Every kernel returns a [`LossResult`] holding the scalar value and the
//! gradient with respect to each differentiable input, keyed by [`Wrt`].
//! Distributions enter as probabilities; the gradient with respect to the
//! pre-softmax logits is derived from the probabilities alone, so callers
//! that own the logits can backpropagate without recomputing the softmax.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::viewgeom::{ClassIndex, ViewpointDistribution, NUM_CLASSES};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// The differentiable inputs a gradient can be taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Wrt {
    /// Probabilities of the (reference) sample.
    Probs,
    /// Pre-softmax logits of the (reference) sample.
    Logits,
    FlipProbs,
    FlipLogits,
    /// First / second member of a pair.
    Emb1,
    Emb2,
    /// Per-angle embedding of an image and of its mirrored copy.
    EmbX,
    EmbFlip,
    Reference,
    Positive,
    Negative,
    /// Trainable triplet temperature (a length-1 vector).
    Scale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    grads: BTreeMap<Wrt, Vec<f64>>,
}

impl LossResult {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, wrt: Wrt, grad: Vec<f64>) -> Self {
        self.grads.insert(wrt, grad);
        self
    }

    pub fn grad(&self, wrt: Wrt) -> Option<&[f64]> {
        self.grads.get(&wrt).map(Vec::as_slice)
    }

    pub fn grad_mut(&mut self, wrt: Wrt) -> Option<&mut Vec<f64>> {
        self.grads.get_mut(&wrt)
    }

    /// Removes and returns one gradient.
    pub fn take_grad(&mut self, wrt: Wrt) -> Option<Vec<f64>> {
        self.grads.remove(&wrt)
    }

    pub fn grads(&self) -> impl Iterator<Item = (Wrt, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adds `weight * other` into `self`, value and gradients alike.
    fn accumulate(&mut self, other: &LossResult, weight: f64) {
        self.value += weight * other.value;
        for (wrt, g) in &other.grads {
            let slot = self.grads.entry(*wrt).or_insert_with(|| vec![0.0; g.len()]);
            for (s, x) in slot.iter_mut().zip(g) {
                *s += weight * x;
            }
        }
    }
}

/// How the distance between the label class and a class is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Shortest way around the circle.
    #[default]
    Circular,
    /// Plain `|k_gt - k|` on the class indices.
    Literal,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circular" => Ok(Self::Circular),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown distance mode `{other}`"))),
        }
    }
}

impl DistanceMode {
    pub fn between(self, a: ClassIndex, b: ClassIndex) -> f64 {
        self.steps(a.get(), b.get()) as f64
    }

    fn steps(self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b);
        match self {
            Self::Circular => d.min(NUM_CLASSES - d),
            Self::Literal => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricLossParams {
    pub sigma: f64,
    pub distance: DistanceMode,
    /// Fixed normalizer; `None` uses the sum of the decay weights.
    pub normalization: Option<f64>,
}

impl Default for GeometricLossParams {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            distance: DistanceMode::Circular,
            normalization: None,
        }
    }
}

impl GeometricLossParams {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::OutOfRange(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(c) = self.normalization {
            if !(c > 0.0) {
                return Err(Error::OutOfRange(format!("normalization must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Unnormalized decay weights `exp(-dist(k_gt, k) / sigma)` and their normalizer.
pub fn geometric_weights(k_gt: ClassIndex, params: &GeometricLossParams) -> (Vec<f64>, f64) {
    let g = k_gt.get();
    let w: Vec<f64> = with_decay(params.sigma, |decay| match params.distance {
        // the circular row for g is the row for 0 rotated right by g
        DistanceMode::Circular => [&decay.ring[NUM_CLASSES - g..], &decay.ring[..NUM_CLASSES - g]].concat(),
        DistanceMode::Literal => decay.by_distance[1..=g]
            .iter()
            .rev()
            .chain(&decay.by_distance[..NUM_CLASSES - g])
            .copied()
            .collect(),
    });
    let c = params.normalization.unwrap_or_else(|| w.iter().sum());
    (w, c)
}

struct DecayTable {
    sigma_bits: u64,
    /// `exp(-d / sigma)` for `d` in `0..360`.
    by_distance: Vec<f64>,
    /// Circular weights around class 0.
    ring: Vec<f64>,
}

/// Runs `f` on the decay table for `sigma`, cached per thread since the loss
/// is evaluated many times per sigma.
fn with_decay<T>(sigma: f64, f: impl FnOnce(&DecayTable) -> T) -> T {
    thread_local! {
        static DECAY: RefCell<Option<DecayTable>> = const { RefCell::new(None) };
    }
    DECAY.with_borrow_mut(|cache| {
        if cache.as_ref().is_none_or(|t| t.sigma_bits != sigma.to_bits()) {
            let by_distance: Vec<f64> = (0..NUM_CLASSES).map(|d| (-(d as f64) / sigma).exp()).collect();
            let ring = (0..NUM_CLASSES).map(|k| by_distance[DistanceMode::Circular.steps(0, k)]).collect();
            *cache = Some(DecayTable {
                sigma_bits: sigma.to_bits(),
                by_distance,
                ring,
            });
        }
        f(cache.as_ref().expect("filled above"))
    })
}

/// Distance-weighted cross-entropy against a soft target centered on `k_gt`.
///
/// Gradients: [`Wrt::Probs`] and [`Wrt::Logits`].
pub fn geometric_loss(q: &ViewpointDistribution, k_gt: ClassIndex, params: &GeometricLossParams) -> Result<LossResult> {
    params.validate()?;
    let sum = q.sum();
    if (sum - 1.0).abs() > ViewpointDistribution::NORM_TOL {
        return Err(Error::NonNormalizedInput { sum });
    }
    let q = q.as_slice();
    let (w, c) = geometric_weights(k_gt, params);

    let mut value = 0.0;
    let mut grad_q = vec![0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        let p = q[k].max(PROB_FLOOR);
        value -= w[k] * p.ln();
        if q[k] > PROB_FLOOR {
            grad_q[k] = -w[k] / (c * q[k]);
        }
    }
    value /= c;

    Ok(LossResult::new(value)
        .with_grad(Wrt::Logits, softmax_backward(q, &grad_q))
        .with_grad(Wrt::Probs, grad_q))
}

/// Pulls a probability gradient back through the softmax.
pub fn softmax_backward(q: &[f64], grad_q: &[f64]) -> Vec<f64> {
    let dot: f64 = q.iter().zip(grad_q).map(|(p, g)| p * g).sum();
    q.iter().zip(grad_q).map(|(p, g)| p * (g - dot)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveParams {
    pub margin: f64,
    /// Pairs at most this many degrees apart count as similar.
    pub similarity_threshold_deg: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            margin: 1.0,
            similarity_threshold_deg: 10.0,
        }
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Siamese margin loss on the Euclidean distance of two embeddings.
///
/// Gradients: [`Wrt::Emb1`] and [`Wrt::Emb2`].
pub fn contrastive_loss(f1: &[f64], f2: &[f64], similar: bool, params: &ContrastiveParams) -> Result<LossResult> {
    check_dims(f1, f2)?;
    if !(params.margin > 0.0) {
        return Err(Error::OutOfRange(format!("margin must be positive, got {}", params.margin)));
    }
    let diff: Vec<f64> = f1.iter().zip(f2).map(|(a, b)| a - b).collect();
    let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();

    let (value, coef) = if similar {
        (0.5 * d * d, 1.0)
    } else if d < params.margin && d > 0.0 {
        let gap = params.margin - d;
        (0.5 * gap * gap, -gap / d)
    } else if d == 0.0 {
        // no direction to push along; subgradient zero
        (0.5 * params.margin * params.margin, 0.0)
    } else {
        (0.0, 0.0)
    };
    let g1: Vec<f64> = diff.iter().map(|x| coef * x).collect();
    let g2: Vec<f64> = g1.iter().map(|x| -x).collect();
    Ok(LossResult::new(value).with_grad(Wrt::Emb1, g1).with_grad(Wrt::Emb2, g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipParams {
    /// Weight of the mirrored-embedding consistency term.
    pub lambda: f64,
    pub geom: GeometricLossParams,
}

impl Default for FlipParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            geom: GeometricLossParams::default(),
        }
    }
}

/// An image and its horizontal mirror as seen by the viewpoint head.
#[derive(Debug, Clone, Copy)]
pub struct FlipInputs<'a> {
    pub q_x: &'a ViewpointDistribution,
    pub q_flip: &'a ViewpointDistribution,
    /// Per-angle embeddings (length 360).
    pub f_x: &'a [f64],
    pub f_flip: &'a [f64],
}

/// Geometric loss on both views plus `lambda * ||f_x - flip(f_flip)||²`.
///
/// `k_gt` labels the unmirrored image; the mirror is labeled with its flip.
/// Gradients: probabilities and logits of both views, and both embeddings.
pub fn flip_loss(inputs: &FlipInputs<'_>, k_gt: ClassIndex, params: &FlipParams) -> Result<LossResult> {
    for f in [inputs.f_x, inputs.f_flip] {
        if f.len() != NUM_CLASSES {
            return Err(Error::DimensionMismatch {
                expected: NUM_CLASSES,
                got: f.len(),
            });
        }
    }
    let mut gx = geometric_loss(inputs.q_x, k_gt, &params.geom)?;
    let mut gf = geometric_loss(inputs.q_flip, k_gt.flip(), &params.geom)?;

    let f_x = inputs.f_x;
    let f_flip = inputs.f_flip;
    let residual = |k: usize| f_x[k] - f_flip[(NUM_CLASSES - k) % NUM_CLASSES];
    // Sum over mirror pairs {k, 360-k} so swapping the two views reproduces
    // the exact same floating-point sum.
    let mut sq = residual(0).powi(2);
    for k in 1..NUM_CLASSES / 2 {
        sq += residual(k).powi(2) + residual(NUM_CLASSES - k).powi(2);
    }
    sq += residual(NUM_CLASSES / 2).powi(2);

    let r: Vec<f64> = (0..NUM_CLASSES).map(residual).collect();
    let grad_x: Vec<f64> = r.iter().map(|x| 2.0 * params.lambda * x).collect();
    let grad_flip: Vec<f64> = (0..NUM_CLASSES)
        .map(|k| -2.0 * params.lambda * r[(NUM_CLASSES - k) % NUM_CLASSES])
        .collect();

    let value = gx.value + gf.value + params.lambda * sq;
    let take = |res: &mut LossResult, w: Wrt| res.take_grad(w).expect("geometric gradient");
    Ok(LossResult::new(value)
        .with_grad(Wrt::Probs, take(&mut gx, Wrt::Probs))
        .with_grad(Wrt::Logits, take(&mut gx, Wrt::Logits))
        .with_grad(Wrt::FlipProbs, take(&mut gf, Wrt::Probs))
        .with_grad(Wrt::FlipLogits, take(&mut gf, Wrt::Logits))
        .with_grad(Wrt::EmbX, grad_x)
        .with_grad(Wrt::EmbFlip, grad_flip))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two embeddings, in `[-1, 1]`.
///
/// Gradients: [`Wrt::Emb1`] and [`Wrt::Emb2`].
pub fn cosine_distance(f1: &[f64], f2: &[f64]) -> Result<LossResult> {
    check_dims(f1, f2)?;
    let n1 = dot(f1, f1).sqrt();
    let n2 = dot(f2, f2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    let cos = (dot(f1, f2) / (n1 * n2)).clamp(-1.0, 1.0);
    let g1 = f1
        .iter()
        .zip(f2)
        .map(|(a, b)| b / (n1 * n2) - cos * a / (n1 * n1))
        .collect();
    let g2 = f1
        .iter()
        .zip(f2)
        .map(|(a, b)| a / (n1 * n2) - cos * b / (n2 * n2))
        .collect();
    Ok(LossResult::new(cos).with_grad(Wrt::Emb1, g1).with_grad(Wrt::Emb2, g2))
}

/// Trainable multiplier applied to cosine similarities before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletScale(pub f64);

impl Default for TripletScale {
    fn default() -> Self {
        Self(1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TripletInputs<'a> {
    pub reference: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
    pub scale: TripletScale,
}

/// Softmax-ratio triplet loss on cosine similarities.
///
/// With `(d+, d-) = softmax(s·cos(ref, pos), s·cos(ref, neg))` the value is
/// `d-² + (1 - d+)²`; it vanishes when the positive is much more similar to
/// the reference than the negative.
/// Gradients: the three embeddings and [`Wrt::Scale`].
pub fn triplet_loss(inputs: &TripletInputs<'_>) -> Result<LossResult> {
    let s = inputs.scale.0;
    let pos = cosine_distance(inputs.reference, inputs.positive)?;
    let neg = cosine_distance(inputs.reference, inputs.negative)?;
    let (dp_raw, dn_raw) = (pos.value, neg.value);

    let m = (s * dp_raw).max(s * dn_raw);
    let ep = (s * dp_raw - m).exp();
    let en = (s * dn_raw - m).exp();
    let d_pos = ep / (ep + en);
    let d_neg = en / (ep + en);
    let value = d_neg * d_neg + (1.0 - d_pos) * (1.0 - d_pos);

    // chain through the two-way softmax
    let dl_dpos = -2.0 * (1.0 - d_pos);
    let dl_dneg = 2.0 * d_neg;
    let jac = d_pos * d_neg;
    let dl_du_pos = jac * (dl_dpos - dl_dneg);
    let dl_du_neg = jac * (dl_dneg - dl_dpos);
    let dl_dcos_pos = s * dl_du_pos;
    let dl_dcos_neg = s * dl_du_neg;
    let dl_ds = dp_raw * dl_du_pos + dn_raw * dl_du_neg;

    fn g(r: &LossResult, w: Wrt) -> &[f64] {
        r.grad(w).expect("cosine gradient")
    }
    let grad_ref = g(&pos, Wrt::Emb1)
        .iter()
        .zip(g(&neg, Wrt::Emb1))
        .map(|(a, b)| dl_dcos_pos * a + dl_dcos_neg * b)
        .collect();
    let grad_pos = g(&pos, Wrt::Emb2).iter().map(|a| dl_dcos_pos * a).collect();
    let grad_neg = g(&neg, Wrt::Emb2).iter().map(|b| dl_dcos_neg * b).collect();

    Ok(LossResult::new(value)
        .with_grad(Wrt::Reference, grad_ref)
        .with_grad(Wrt::Positive, grad_pos)
        .with_grad(Wrt::Negative, grad_neg)
        .with_grad(Wrt::Scale, vec![dl_ds]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointParams {
    /// Weight of the flip term relative to the triplet term.
    pub lambda: f64,
    pub flip: FlipParams,
}

impl Default for ViewpointParams {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            flip: FlipParams::default(),
        }
    }
}

/// Triplet loss plus `lambda` times the flip loss of the reference (or of a
/// labeled stand-in when the triplet comes from unlabeled video).
pub fn viewpoint_loss(
    triplet: &TripletInputs<'_>,
    flip: &FlipInputs<'_>,
    k_gt: ClassIndex,
    params: &ViewpointParams,
) -> Result<LossResult> {
    let mut out = triplet_loss(triplet)?;
    let fl = flip_loss(flip, k_gt, &params.flip)?;
    out.accumulate(&fl, params.lambda);
    Ok(out)
}

/// Sum of the four externally computed detector losses and the viewpoint loss.
pub fn total_loss(detection_terms: [f64; 4], viewpoint: &LossResult) -> f64 {
    detection_terms.iter().sum::<f64>() + viewpoint.value
}

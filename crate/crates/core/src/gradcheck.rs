//! Finite-difference verification of the analytic loss gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{
    contrastive_loss, flip_loss, geometric_loss, triplet_loss, viewpoint_loss, ContrastiveParams, DistanceMode,
    FlipInputs, FlipParams, GeometricLossParams, LossResult, TripletInputs, TripletScale, ViewpointParams, Wrt,
};
use crate::viewgeom::{ClassIndex, ViewpointDistribution, NUM_CLASSES};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Central differences of `f` around `x` with step `h`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute error when both
/// vectors are numerically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Geometric,
    Contrastive,
    Flip,
    Triplet,
    Viewpoint,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Geometric,
        LossKind::Contrastive,
        LossKind::Flip,
        LossKind::Triplet,
        LossKind::Viewpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Geometric => "geometric",
            Self::Contrastive => "contrastive",
            Self::Flip => "flip",
            Self::Triplet => "triplet",
            Self::Viewpoint => "viewpoint",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Perturbs every analytic gradient before comparing (negative control).
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub trials: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// A differentiable input: its key in the [`LossResult`] and the point at which
/// it is probed.
struct Probe {
    wrt: Wrt,
    point: Vec<f64>,
}

/// One random instance: evaluates the loss given overrides for each probe.
trait Instance {
    fn probes(&self) -> Vec<Probe>;
    fn eval(&self, wrt: Option<(Wrt, &[f64])>) -> LossResult;
}

fn randvec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn pick<'a>(over: Option<(Wrt, &'a [f64])>, wrt: Wrt, default: &'a [f64]) -> &'a [f64] {
    match over {
        Some((w, v)) if w == wrt => v,
        _ => default,
    }
}

fn softmaxed(z: &[f64]) -> ViewpointDistribution {
    ViewpointDistribution::softmax(z).expect("360 logits")
}

struct GeomInstance {
    logits: Vec<f64>,
    k: ClassIndex,
    params: GeometricLossParams,
}

impl Instance for GeomInstance {
    fn probes(&self) -> Vec<Probe> {
        vec![Probe {
            wrt: Wrt::Logits,
            point: self.logits.clone(),
        }]
    }

    fn eval(&self, over: Option<(Wrt, &[f64])>) -> LossResult {
        let z = pick(over, Wrt::Logits, &self.logits);
        geometric_loss(&softmaxed(z), self.k, &self.params).expect("valid geometric input")
    }
}

struct ContrastiveInstance {
    f1: Vec<f64>,
    f2: Vec<f64>,
    similar: bool,
    params: ContrastiveParams,
}

impl Instance for ContrastiveInstance {
    fn probes(&self) -> Vec<Probe> {
        vec![
            Probe {
                wrt: Wrt::Emb1,
                point: self.f1.clone(),
            },
            Probe {
                wrt: Wrt::Emb2,
                point: self.f2.clone(),
            },
        ]
    }

    fn eval(&self, over: Option<(Wrt, &[f64])>) -> LossResult {
        contrastive_loss(
            pick(over, Wrt::Emb1, &self.f1),
            pick(over, Wrt::Emb2, &self.f2),
            self.similar,
            &self.params,
        )
        .expect("valid contrastive input")
    }
}

struct FlipInstance {
    zx: Vec<f64>,
    zf: Vec<f64>,
    fx: Vec<f64>,
    ff: Vec<f64>,
    /// Softmaxes of `zx` and `zf`.
    qx: ViewpointDistribution,
    qf: ViewpointDistribution,
    k: ClassIndex,
    params: FlipParams,
}

impl FlipInstance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let zx = randvec(rng, NUM_CLASSES, 3.0);
        let zf = randvec(rng, NUM_CLASSES, 3.0);
        Self {
            qx: softmaxed(&zx),
            qf: softmaxed(&zf),
            zx,
            zf,
            fx: randvec(rng, NUM_CLASSES, 1.0),
            ff: randvec(rng, NUM_CLASSES, 1.0),
            k: ClassIndex::wrapping(rng.random_range(0..360)),
            params: FlipParams {
                lambda: rng.random_range(0.1..2.0),
                geom: GeometricLossParams::default(),
            },
        }
    }

    fn probes(&self) -> Vec<Probe> {
        [
            (Wrt::Logits, &self.zx),
            (Wrt::FlipLogits, &self.zf),
            (Wrt::EmbX, &self.fx),
            (Wrt::EmbFlip, &self.ff),
        ]
        .into_iter()
        .map(|(wrt, p)| Probe { wrt, point: p.clone() })
        .collect()
    }

    fn with_inputs<T>(&self, over: Option<(Wrt, &[f64])>, f: impl FnOnce(&FlipInputs<'_>) -> T) -> T {
        // only the perturbed view needs a fresh softmax
        let fresh = |wrt: Wrt| match over {
            Some((w, z)) if w == wrt => Some(softmaxed(z)),
            _ => None,
        };
        let (qx, qf) = (fresh(Wrt::Logits), fresh(Wrt::FlipLogits));
        let inputs = FlipInputs {
            q_x: qx.as_ref().unwrap_or(&self.qx),
            q_flip: qf.as_ref().unwrap_or(&self.qf),
            f_x: pick(over, Wrt::EmbX, &self.fx),
            f_flip: pick(over, Wrt::EmbFlip, &self.ff),
        };
        f(&inputs)
    }
}

impl Instance for FlipInstance {
    fn probes(&self) -> Vec<Probe> {
        FlipInstance::probes(self)
    }

    fn eval(&self, over: Option<(Wrt, &[f64])>) -> LossResult {
        self.with_inputs(over, |inp| flip_loss(inp, self.k, &self.params).expect("valid flip input"))
    }
}

struct TripletInstance {
    r: Vec<f64>,
    p: Vec<f64>,
    n: Vec<f64>,
    s: f64,
}

impl TripletInstance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            r: randvec(rng, 16, 1.0),
            p: randvec(rng, 16, 1.0),
            n: randvec(rng, 16, 1.0),
            s: rng.random_range(-4.0..4.0),
        }
    }

    fn probes(&self) -> Vec<Probe> {
        [
            (Wrt::Reference, &self.r),
            (Wrt::Positive, &self.p),
            (Wrt::Negative, &self.n),
        ]
        .into_iter()
        .map(|(wrt, p)| Probe { wrt, point: p.clone() })
        .chain(std::iter::once(Probe {
            wrt: Wrt::Scale,
            point: vec![self.s],
        }))
        .collect()
    }

    fn inputs<'a>(&'a self, over: Option<(Wrt, &'a [f64])>) -> TripletInputs<'a> {
        TripletInputs {
            reference: pick(over, Wrt::Reference, &self.r),
            positive: pick(over, Wrt::Positive, &self.p),
            negative: pick(over, Wrt::Negative, &self.n),
            scale: TripletScale(pick(over, Wrt::Scale, std::slice::from_ref(&self.s))[0]),
        }
    }
}

impl Instance for TripletInstance {
    fn probes(&self) -> Vec<Probe> {
        TripletInstance::probes(self)
    }

    fn eval(&self, over: Option<(Wrt, &[f64])>) -> LossResult {
        triplet_loss(&self.inputs(over)).expect("valid triplet input")
    }
}

struct ViewpointInstance {
    triplet: TripletInstance,
    flip: FlipInstance,
    lambda: f64,
}

impl Instance for ViewpointInstance {
    fn probes(&self) -> Vec<Probe> {
        let mut p = self.triplet.probes();
        p.extend(self.flip.probes());
        p
    }

    fn eval(&self, over: Option<(Wrt, &[f64])>) -> LossResult {
        let params = ViewpointParams {
            lambda: self.lambda,
            flip: self.flip.params,
        };
        let triplet = self.triplet.inputs(over);
        self.flip.with_inputs(over, |flip| {
            viewpoint_loss(&triplet, flip, self.flip.k, &params).expect("valid viewpoint input")
        })
    }
}

fn random_instance(kind: LossKind, rng: &mut ChaCha8Rng) -> Box<dyn Instance> {
    match kind {
        LossKind::Geometric => Box::new(GeomInstance {
            logits: randvec(rng, NUM_CLASSES, 3.0),
            k: ClassIndex::wrapping(rng.random_range(0..360)),
            params: GeometricLossParams {
                sigma: rng.random_range(1.0..6.0),
                distance: if rng.random_bool(0.5) {
                    DistanceMode::Circular
                } else {
                    DistanceMode::Literal
                },
                normalization: None,
            },
        }),
        LossKind::Contrastive => {
            let f1 = randvec(rng, 16, 1.0);
            let f2 = randvec(rng, 16, 1.0);
            let d = f1.iter().zip(&f2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let similar = rng.random_bool(0.5);
            // keep clear of the hinge at D = m
            let margin = loop {
                let m = d * rng.random_range(0.5..2.0);
                if (m - d).abs() > 1e-2 {
                    break m;
                }
            };
            Box::new(ContrastiveInstance {
                f1,
                f2,
                similar,
                params: ContrastiveParams {
                    margin,
                    ..Default::default()
                },
            })
        }
        LossKind::Flip => Box::new(FlipInstance::random(rng)),
        LossKind::Triplet => Box::new(TripletInstance::random(rng)),
        LossKind::Viewpoint => Box::new(ViewpointInstance {
            triplet: TripletInstance::random(rng),
            flip: FlipInstance::random(rng),
            lambda: rng.random_range(0.5..6.0),
        }),
    }
}

/// Compares analytic and central-difference gradients on `opts.trials` random
/// valid inputs; per trial the error is the worst over all differentiable inputs.
pub fn grad_check(kind: LossKind, opts: &GradCheckOptions) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(kind as u64);
    let mut max_err: f64 = 0.0;
    let mut sum_err = 0.0;
    for _ in 0..opts.trials {
        let inst = random_instance(kind, &mut rng);
        let analytic = inst.eval(None);
        let mut trial_err: f64 = 0.0;
        for probe in inst.probes() {
            let mut grad = analytic.grad(probe.wrt).expect("probe has a gradient").to_vec();
            if opts.corrupt {
                grad.iter_mut().for_each(|g| *g = *g * 1.1 + 1e-3);
            }
            let numeric = central_difference(|x| inst.eval(Some((probe.wrt, x))).value, &probe.point, opts.step);
            trial_err = trial_err.max(relative_error(&grad, &numeric));
        }
        max_err = max_err.max(trial_err);
        sum_err += trial_err;
    }
    GradCheckReport {
        kind,
        trials: opts.trials,
        max_rel_err: max_err,
        mean_rel_err: if opts.trials == 0 { 0.0 } else { sum_err / opts.trials as f64 },
        tolerance: opts.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_handles_zero() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn every_kind_passes_quickly() {
        let opts = GradCheckOptions {
            trials: 5,
            ..Default::default()
        };
        for kind in LossKind::ALL {
            let r = grad_check(kind, &opts);
            assert!(r.passed(), "{kind}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradCheckOptions {
            trials: 3,
            corrupt: true,
            ..Default::default()
        };
        for kind in LossKind::ALL {
            assert!(!grad_check(kind, &opts).passed(), "{kind}");
        }
    }
}

//! Loss configurations and a single optimization step over a mini-batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, flip_loss, geometric_loss, triplet_loss, ContrastiveParams, FlipInputs, FlipParams,
    GeometricLossParams, LossResult, TripletInputs, Wrt,
};
use crate::viewgeom::ClassIndex;

use super::model::{ForwardPass, Gradients, OptimizerState, ParamMask, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConfig {
    Geometric,
    /// Geometric loss on both members plus the pair term.
    Contrastive,
    Flip,
    /// Triplet term plus geometric loss on the reference.
    TripletGeometric,
    /// Triplet term plus weighted flip loss.
    Viewpoint,
}

impl LossConfig {
    pub const ALL: [LossConfig; 5] = [
        LossConfig::Geometric,
        LossConfig::Contrastive,
        LossConfig::Flip,
        LossConfig::TripletGeometric,
        LossConfig::Viewpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Geometric => "geometric",
            Self::Contrastive => "contrastive",
            Self::Flip => "flip",
            Self::TripletGeometric => "triplet_geometric",
            Self::Viewpoint => "viewpoint",
        }
    }

    pub fn uses_triplets(self) -> bool {
        matches!(self, Self::TripletGeometric | Self::Viewpoint)
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss config `{s}`")))
    }
}

/// Hyperparameters shared by all loss configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub geometric: GeometricLossParams,
    pub contrastive: ContrastiveParams,
    pub flip: FlipParams,
    /// Weight of the flip term in the viewpoint loss.
    pub viewpoint_lambda: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            geometric: GeometricLossParams::default(),
            contrastive: ContrastiveParams::default(),
            flip: FlipParams::default(),
            viewpoint_lambda: 5.0,
        }
    }
}

/// A labeled image together with its mirrored copy.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub features: &'a [f64],
    pub flipped: &'a [f64],
    pub label: ClassIndex,
}

/// One element of a mini-batch.
#[derive(Debug, Clone, Copy)]
pub enum Example<'a> {
    Single(Labeled<'a>),
    Pair {
        first: Labeled<'a>,
        second: Labeled<'a>,
        similar: bool,
    },
    /// `anchor` carries the supervised term; for labeled triplets it is the
    /// reference itself, for video triplets a labeled stand-in.
    Triplet {
        reference: &'a [f64],
        positive: &'a [f64],
        negative: &'a [f64],
        anchor: Labeled<'a>,
    },
}

/// Records each forward pass so gradients can be routed back afterwards.
struct Tape<'a> {
    inputs: Vec<&'a [f64]>,
    passes: Vec<ForwardPass>,
    d_logits: Vec<Vec<f64>>,
    d_hidden: Vec<Vec<f64>>,
    d_scale: f64,
}

impl<'a> Tape<'a> {
    fn new() -> Self {
        Self {
            inputs: Vec::new(),
            passes: Vec::new(),
            d_logits: Vec::new(),
            d_hidden: Vec::new(),
            d_scale: 0.0,
        }
    }

    fn push(&mut self, model: &ToyModel, x: &'a [f64]) -> Result<usize> {
        let pass = model.forward(x)?;
        self.d_logits.push(vec![0.0; pass.logits.len()]);
        self.d_hidden.push(vec![0.0; pass.hidden.len()]);
        self.inputs.push(x);
        self.passes.push(pass);
        Ok(self.passes.len() - 1)
    }

    fn add(slot: &mut [f64], g: Option<&[f64]>, w: f64) {
        if let Some(g) = g {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += w * x;
            }
        }
    }

    fn logits_grad(&mut self, idx: usize, g: Option<&[f64]>, w: f64) {
        Self::add(&mut self.d_logits[idx], g, w);
    }

    fn hidden_grad(&mut self, idx: usize, g: Option<&[f64]>, w: f64) {
        Self::add(&mut self.d_hidden[idx], g, w);
    }
}

fn geometric_term(tape: &mut Tape<'_>, idx: usize, label: ClassIndex, s: &LossSettings, w: f64) -> Result<f64> {
    let r = geometric_loss(&tape.passes[idx].distribution, label, &s.geometric)?;
    tape.logits_grad(idx, r.grad(Wrt::Logits), w);
    Ok(r.value)
}

fn flip_term<'a>(
    tape: &mut Tape<'a>,
    model: &ToyModel,
    sample: Labeled<'a>,
    s: &LossSettings,
    w: f64,
) -> Result<f64> {
    let x = tape.push(model, sample.features)?;
    let f = tape.push(model, sample.flipped)?;
    let r = {
        let (px, pf) = (&tape.passes[x], &tape.passes[f]);
        let inputs = FlipInputs {
            q_x: &px.distribution,
            q_flip: &pf.distribution,
            f_x: &px.logits,
            f_flip: &pf.logits,
        };
        flip_loss(&inputs, sample.label, &s.flip)?
    };
    // the per-angle embedding is the logit vector itself
    tape.logits_grad(x, r.grad(Wrt::Logits), w);
    tape.logits_grad(x, r.grad(Wrt::EmbX), w);
    tape.logits_grad(f, r.grad(Wrt::FlipLogits), w);
    tape.logits_grad(f, r.grad(Wrt::EmbFlip), w);
    Ok(r.value)
}

fn triplet_term<'a>(
    tape: &mut Tape<'a>,
    model: &ToyModel,
    refs: [&'a [f64]; 3],
    w: f64,
) -> Result<(f64, usize)> {
    let ids = [tape.push(model, refs[0])?, tape.push(model, refs[1])?, tape.push(model, refs[2])?];
    let r: LossResult = triplet_loss(&TripletInputs {
        reference: &tape.passes[ids[0]].hidden,
        positive: &tape.passes[ids[1]].hidden,
        negative: &tape.passes[ids[2]].hidden,
        scale: model.scale,
    })?;
    for (idx, wrt) in ids.into_iter().zip([Wrt::Reference, Wrt::Positive, Wrt::Negative]) {
        tape.hidden_grad(idx, r.grad(wrt), w);
    }
    tape.d_scale += w * r.grad(Wrt::Scale).map_or(0.0, |g| g[0]);
    Ok((r.value, ids[0]))
}

fn mismatch(config: LossConfig, ex: &Example<'_>) -> Error {
    let kind = match ex {
        Example::Single(_) => "single",
        Example::Pair { .. } => "pair",
        Example::Triplet { .. } => "triplet",
    };
    Error::Config(format!("loss config `{config}` cannot consume a {kind} example"))
}

fn example_loss<'a>(
    tape: &mut Tape<'a>,
    model: &ToyModel,
    ex: &Example<'a>,
    config: LossConfig,
    s: &LossSettings,
    w: f64,
) -> Result<f64> {
    match (config, *ex) {
        (LossConfig::Geometric, Example::Single(l)) => {
            let idx = tape.push(model, l.features)?;
            geometric_term(tape, idx, l.label, s, w)
        }
        (LossConfig::Flip, Example::Single(l)) => flip_term(tape, model, l, s, w),
        (LossConfig::Contrastive, Example::Pair { first, second, similar }) => {
            let a = tape.push(model, first.features)?;
            let b = tape.push(model, second.features)?;
            let r = contrastive_loss(&tape.passes[a].hidden, &tape.passes[b].hidden, similar, &s.contrastive)?;
            tape.hidden_grad(a, r.grad(Wrt::Emb1), w);
            tape.hidden_grad(b, r.grad(Wrt::Emb2), w);
            let ga = geometric_term(tape, a, first.label, s, w)?;
            let gb = geometric_term(tape, b, second.label, s, w)?;
            Ok(r.value + ga + gb)
        }
        (
            LossConfig::TripletGeometric,
            Example::Triplet {
                reference,
                positive,
                negative,
                anchor,
            },
        ) => {
            let (t, _) = triplet_term(tape, model, [reference, positive, negative], w)?;
            let idx = tape.push(model, anchor.features)?;
            Ok(t + geometric_term(tape, idx, anchor.label, s, w)?)
        }
        (
            LossConfig::Viewpoint,
            Example::Triplet {
                reference,
                positive,
                negative,
                anchor,
            },
        ) => {
            let (t, _) = triplet_term(tape, model, [reference, positive, negative], w)?;
            let lambda = s.viewpoint_lambda;
            Ok(t + lambda * flip_term(tape, model, anchor, s, w * lambda)?)
        }
        _ => Err(mismatch(config, ex)),
    }
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
pub fn batch_loss(
    model: &ToyModel,
    batch: &[Example<'_>],
    config: LossConfig,
    settings: &LossSettings,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let w = 1.0 / batch.len() as f64;
    let mut tape = Tape::new();
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(&mut tape, model, ex, config, settings, w)?;
    }
    let mut grads = Gradients::zeros_like(model);
    for i in 0..tape.passes.len() {
        model.backward(tape.inputs[i], &tape.passes[i], &tape.d_logits[i], &tape.d_hidden[i], &mut grads);
    }
    grads.scale = tape.d_scale;
    Ok((total * w, grads))
}

/// Computes the batch loss, applies one Adam update and returns the
/// pre-update loss.
pub fn train_step(
    model: &mut ToyModel,
    batch: &[Example<'_>],
    config: LossConfig,
    settings: &LossSettings,
    opt: &mut OptimizerState,
    mask: ParamMask,
) -> Result<f64> {
    let (loss, grads) = batch_loss(model, batch, config, settings)?;
    if !loss.is_finite() {
        return Err(Error::OutOfRange(format!("non-finite training loss {loss}")));
    }
    opt.apply(model, &grads, mask);
    Ok(loss)
}

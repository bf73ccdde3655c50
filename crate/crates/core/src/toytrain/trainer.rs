//! Phased training: noiseless rendered data, then noisy labeled data, then
//! optional video triplets, then a reduced-rate pass over the head alone.

use std::collections::HashMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{sample_video_triplet, substitute_flip_sample, triplet_for_reference, CurriculumSchedule, LabeledPool, VideoSequence};
use crate::viewgeom::angular_distance;

use super::model::{OptimizerState, ParamMask, ToyModel};
use super::step::{train_step, Example, Labeled, LossConfig, LossSettings};
use super::synth::{Dataset, SyntheticGenerator, RENDERED_STREAM, VIDEO_STREAM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Synthetic,
    Labeled,
    Video,
    Head,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Synthetic, Phase::Labeled, Phase::Video, Phase::Head];

    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Labeled => "labeled",
            Self::Video => "video",
            Self::Head => "head",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unscaled iteration counts per phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseBudget {
    pub synthetic: u64,
    pub labeled: u64,
    pub video: u64,
    pub head: u64,
}

impl Default for PhaseBudget {
    fn default() -> Self {
        Self {
            synthetic: 200_000,
            labeled: 200_000,
            video: 0,
            head: 150_000,
        }
    }
}

/// Simulated turntable videos used by the video phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSettings {
    pub sequences: usize,
    pub frames: usize,
    pub max_step_deg: f64,
    pub negative_gap: usize,
}

impl Default for VideoSettings {
    fn default() -> Self {
        Self {
            sequences: 10,
            frames: 400,
            max_step_deg: 2.0,
            negative_gap: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the head-only phase learning rate.
    pub head_lr_factor: f64,
    pub hidden_dim: usize,
    /// Scales every phase budget and the curriculum boundary.
    pub schedule_scale: f64,
    pub budget: PhaseBudget,
    pub log_interval: u64,
    pub curriculum: CurriculumSchedule,
    pub losses: LossSettings,
    pub video: VideoSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::Geometric,
            seed: 0,
            batch_size: 32,
            learning_rate: OptimizerState::DEFAULT_STEP_SIZE,
            head_lr_factor: 0.1,
            hidden_dim: 64,
            schedule_scale: 1.0,
            budget: PhaseBudget::default(),
            log_interval: 100,
            curriculum: CurriculumSchedule::default(),
            losses: LossSettings::default(),
            video: VideoSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.head_lr_factor >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if !(self.schedule_scale > 0.0) || !self.schedule_scale.is_finite() {
            return Err(Error::Config("schedule_scale must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        self.schedule().validate()
    }

    /// Curriculum with its boundary scaled like the phase budgets.
    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            scale: self.curriculum.scale * self.schedule_scale,
            ..self.curriculum
        }
    }

    pub fn phase_iterations(&self, phase: Phase) -> u64 {
        let base = match phase {
            Phase::Synthetic => self.budget.synthetic,
            Phase::Labeled => self.budget.labeled,
            // video frames carry no labels for the non-triplet losses
            Phase::Video if !self.loss.uses_triplets() => 0,
            Phase::Video => self.budget.video,
            Phase::Head => self.budget.head,
        };
        (base as f64 * self.schedule_scale).round() as u64
    }

    pub fn total_iterations(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.phase_iterations(p)).sum()
    }

    /// Phase of 0-based iteration `step`; `None` past the end.
    pub fn phase_at(&self, step: u64) -> Option<Phase> {
        let mut end = 0;
        for p in Phase::ALL {
            end += self.phase_iterations(p);
            if step < end {
                return Some(p);
            }
        }
        None
    }
}

/// A video with features rendered for each frame.
#[derive(Debug, Clone)]
pub struct RenderedVideo {
    pub sequence: VideoSequence,
    pub frames: Vec<Vec<f64>>,
}

/// Single-class inputs to one training run.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub class_id: u32,
    pub rendered: Dataset,
    pub labeled: Dataset,
    pub videos: Vec<RenderedVideo>,
    rendered_pool: LabeledPool,
    labeled_pool: LabeledPool,
    rendered_index: HashMap<u64, usize>,
    labeled_index: HashMap<u64, usize>,
}

fn index_of(d: &Dataset) -> HashMap<u64, usize> {
    d.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
}

impl TrainingData {
    /// Restricts `train` to `class_id` and renders the matching noiseless
    /// pretraining set and videos from `gen`.
    pub fn build(gen: &SyntheticGenerator, train: &Dataset, class_id: u32, cfg: &TrainConfig) -> Result<Self> {
        gen.validate()?;
        if class_id >= gen.class_count {
            return Err(Error::IndexOutOfRange {
                index: class_id as usize,
                max: gen.class_count as usize - 1,
            });
        }
        let labeled = train.of_class(class_id);
        if labeled.is_empty() {
            return Err(Error::InsufficientPool(format!("no training samples of class {class_id}")));
        }
        if labeled.feature_dim != gen.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: gen.feature_dim,
                got: labeled.feature_dim,
            });
        }
        let per_class = labeled.len() * gen.class_count as usize;
        let rendered = gen.generate_split(per_class, RENDERED_STREAM, 0.0)?.of_class(class_id);

        let mut videos = Vec::new();
        if cfg.phase_iterations(Phase::Video) > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
            rng.set_stream(VIDEO_STREAM + 16 * class_id as u64);
            let projection = gen.projection(class_id);
            for id in 0..cfg.video.sequences {
                let v = &cfg.video;
                let sequence = VideoSequence::simulate(id as u32, class_id, v.frames, v.max_step_deg, v.negative_gap, &mut rng)?;
                let frames = (0..sequence.len())
                    .map(|f| {
                        let az = sequence.frame_azimuth(f).expect("frame in range");
                        gen.render(class_id, az, &projection, gen.noise_std, &mut rng)
                    })
                    .collect();
                videos.push(RenderedVideo { sequence, frames });
            }
            if videos.is_empty() {
                return Err(Error::Config("video phase enabled with zero sequences".into()));
            }
        }
        Ok(Self {
            class_id,
            rendered_pool: rendered.pool(),
            labeled_pool: labeled.pool(),
            rendered_index: index_of(&rendered),
            labeled_index: index_of(&labeled),
            rendered,
            labeled,
            videos,
        })
    }

    fn source(&self, phase: Phase) -> (&Dataset, &LabeledPool, &HashMap<u64, usize>) {
        match phase {
            Phase::Synthetic => (&self.rendered, &self.rendered_pool, &self.rendered_index),
            _ => (&self.labeled, &self.labeled_pool, &self.labeled_index),
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: ToyModel,
    pub optimizer: OptimizerState,
    /// Iterations completed.
    pub step: u64,
    /// Labeled triplets drawn; drives the curriculum.
    pub triplets_drawn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// 1-based iteration count at which the loss was recorded.
    pub iteration: u64,
    pub loss: f64,
    pub phase: Phase,
}

pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainingData,
    state: TrainerState,
}

const INIT_STREAM: u64 = u64::MAX;

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a TrainingData) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let model = ToyModel::xavier(data.labeled.feature_dim, cfg.hidden_dim, &mut rng);
        let optimizer = OptimizerState::new(&model, cfg.learning_rate);
        Ok(Self {
            cfg,
            data,
            state: TrainerState {
                model,
                optimizer,
                step: 0,
                triplets_drawn: 0,
            },
        })
    }

    pub fn resume(cfg: &'a TrainConfig, data: &'a TrainingData, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        state.model.validate()?;
        state.optimizer.validate(&state.model)?;
        if state.model.input_dim != data.labeled.feature_dim || state.model.hidden_dim != cfg.hidden_dim {
            return Err(Error::Config("checkpoint shape does not match the configuration".into()));
        }
        Ok(Self { cfg, data, state })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn model(&self) -> &ToyModel {
        &self.state.model
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.cfg.total_iterations()
    }

    /// Runs every remaining iteration.
    pub fn run(&mut self) -> Result<Vec<LogRow>> {
        self.run_until(self.cfg.total_iterations())
    }

    /// Runs iterations until `stop` (exclusive, clamped to the total) and
    /// returns the log rows produced on the way.
    pub fn run_until(&mut self, stop: u64) -> Result<Vec<LogRow>> {
        let stop = stop.min(self.cfg.total_iterations());
        let mut log = Vec::new();
        while self.state.step < stop {
            let phase = self.cfg.phase_at(self.state.step).expect("step below total");
            let loss = self.step_once(phase)?;
            self.state.step += 1;
            if self.state.step.is_multiple_of(self.cfg.log_interval) {
                log.push(LogRow {
                    iteration: self.state.step,
                    loss,
                    phase,
                });
            }
        }
        Ok(log)
    }

    fn step_once(&mut self, phase: Phase) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.state.step);
        let plan = self.assemble(phase, &mut rng)?;
        let batch = plan.resolve(self.data, phase);
        let (mask, lr) = match phase {
            Phase::Head => (ParamMask::HeadOnly, self.cfg.learning_rate * self.cfg.head_lr_factor),
            _ => (ParamMask::All, self.cfg.learning_rate),
        };
        self.state.optimizer.step_size = lr;
        train_step(
            &mut self.state.model,
            &batch,
            self.cfg.loss,
            &self.cfg.losses,
            &mut self.state.optimizer,
            mask,
        )
    }

    /// Chooses sample indices for one mini-batch.
    fn assemble(&mut self, phase: Phase, rng: &mut ChaCha8Rng) -> Result<BatchPlan> {
        let (data, pool, index) = self.data.source(phase);
        let n = data.len();
        let mut plan = BatchPlan::default();
        let schedule = self.cfg.schedule();
        for _ in 0..self.cfg.batch_size {
            match (self.cfg.loss, phase) {
                (LossConfig::Geometric | LossConfig::Flip, _) => plan.items.push(Planned::Single(rng.random_range(0..n))),
                (LossConfig::Contrastive, _) => {
                    let a = rng.random_range(0..n);
                    let threshold = self.cfg.losses.contrastive.similarity_threshold_deg;
                    let az = data.samples[a].azimuth;
                    let b = if rng.random_bool(0.5) {
                        let near: Vec<usize> = (0..n)
                            .filter(|&j| j != a && angular_distance(data.samples[j].azimuth, az) <= threshold)
                            .collect();
                        near.choose(rng).copied().unwrap_or_else(|| rng.random_range(0..n))
                    } else {
                        rng.random_range(0..n)
                    };
                    let similar = angular_distance(data.samples[b].azimuth, az) <= threshold;
                    plan.items.push(Planned::Pair(a, b, similar));
                }
                (_, Phase::Video) => {
                    let v = rng.random_range(0..self.data.videos.len());
                    let t = sample_video_triplet(&self.data.videos[v].sequence, rng);
                    let sub = substitute_flip_sample(&self.data.labeled_pool, Some(self.data.class_id), rng)?;
                    plan.items.push(Planned::Video {
                        video: v,
                        frames: [t.reference as usize, t.positive as usize, t.negative as usize],
                        anchor: self.data.labeled_index[&sub],
                    });
                }
                _ => {
                    let r = rng.random_range(0..pool.len());
                    let t = triplet_for_reference(pool, r, &schedule, self.state.triplets_drawn, rng)?;
                    self.state.triplets_drawn += 1;
                    plan.items.push(Planned::Triplet([index[&t.reference], index[&t.positive], index[&t.negative]]));
                }
            }
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy)]
enum Planned {
    Single(usize),
    Pair(usize, usize, bool),
    Triplet([usize; 3]),
    Video { video: usize, frames: [usize; 3], anchor: usize },
}

#[derive(Debug, Default)]
struct BatchPlan {
    items: Vec<Planned>,
}

fn labeled_at(d: &Dataset, i: usize) -> Labeled<'_> {
    let s = &d.samples[i];
    Labeled {
        features: &s.features,
        flipped: &s.flipped,
        label: s.azimuth.class(),
    }
}

impl BatchPlan {
    fn resolve<'d>(&self, data: &'d TrainingData, phase: Phase) -> Vec<Example<'d>> {
        let (d, _, _) = data.source(phase);
        self.items
            .iter()
            .map(|p| match *p {
                Planned::Single(i) => Example::Single(labeled_at(d, i)),
                Planned::Pair(a, b, similar) => Example::Pair {
                    first: labeled_at(d, a),
                    second: labeled_at(d, b),
                    similar,
                },
                Planned::Triplet([r, p, n]) => Example::Triplet {
                    reference: &d.samples[r].features,
                    positive: &d.samples[p].features,
                    negative: &d.samples[n].features,
                    anchor: labeled_at(d, r),
                },
                Planned::Video { video, frames, anchor } => {
                    let v = &data.videos[video];
                    Example::Triplet {
                        reference: &v.frames[frames[0]],
                        positive: &v.frames[frames[1]],
                        negative: &v.frames[frames[2]],
                        anchor: labeled_at(&data.labeled, anchor),
                    }
                }
            })
            .collect()
    }
}

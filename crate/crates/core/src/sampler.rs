//! Triplet construction: curriculum negatives over labeled samples and
//! temporally-adjacent triplets from unlabeled rotating-object sequences.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::viewgeom::{angular_distance, AzimuthDeg};

/// Positives must lie within this many degrees of the reference.
pub const POSITIVE_RADIUS_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub sample_id: u64,
    pub class_id: u32,
    pub azimuth: AzimuthDeg,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledPool {
    items: Vec<PoolItem>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl LabeledPool {
    pub fn new(items: Vec<PoolItem>) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            by_class.entry(it.class_id).or_default().push(i);
        }
        Self { items, by_class }
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_class.keys().copied()
    }

    /// Pool indices of the items of one class.
    pub fn class_members(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gaussian over the absolute angular offset between reference and negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetGaussian {
    pub mean_deg: f64,
    pub std_deg: f64,
}

/// Two-phase negative schedule: far ("easy") negatives first, then near ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub easy: OffsetGaussian,
    pub hard: OffsetGaussian,
    /// Triplets drawn from the easy phase before scaling.
    pub easy_triplets: u64,
    /// Multiplies `easy_triplets`; lets short runs keep the phase ratio.
    pub scale: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            easy: OffsetGaussian {
                mean_deg: 100.0,
                std_deg: 20.0,
            },
            hard: OffsetGaussian {
                mean_deg: 15.0,
                std_deg: 2.0,
            },
            easy_triplets: 100_000,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumPhase {
    Easy,
    Hard,
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        for g in [self.easy, self.hard] {
            if !(g.mean_deg > 0.0 && g.std_deg > 0.0) {
                return Err(Error::Config(format!("curriculum gaussian {g:?} must have positive mean and std")));
            }
        }
        if !(self.scale >= 0.0) {
            return Err(Error::Config(format!("curriculum scale {} must be nonnegative", self.scale)));
        }
        Ok(())
    }

    /// First triplet index of the hard phase.
    pub fn boundary(&self) -> u64 {
        (self.easy_triplets as f64 * self.scale).round() as u64
    }

    pub fn phase_at(&self, triplet_index: u64) -> CurriculumPhase {
        if triplet_index < self.boundary() {
            CurriculumPhase::Easy
        } else {
            CurriculumPhase::Hard
        }
    }

    pub fn gaussian(&self, phase: CurriculumPhase) -> OffsetGaussian {
        match phase {
            CurriculumPhase::Easy => self.easy,
            CurriculumPhase::Hard => self.hard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Labeled,
    /// Frames of sequence `sequence`; ids are frame indices.
    Video { sequence: u32 },
}

/// Identifiers of a (reference, positive, negative) triple. Carries no angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub reference: u64,
    pub positive: u64,
    pub negative: u64,
    pub provenance: Provenance,
}

/// Draws an offset in `(5°, 180°]` from `g`, resampling out-of-range draws.
pub fn draw_offset<R: Rng + ?Sized>(g: OffsetGaussian, rng: &mut R) -> f64 {
    let normal = Normal::new(g.mean_deg, g.std_deg).expect("validated gaussian");
    for _ in 0..1000 {
        let x: f64 = normal.sample(rng);
        if x > POSITIVE_RADIUS_DEG && x <= 180.0 {
            return x;
        }
    }
    g.mean_deg.clamp(POSITIVE_RADIUS_DEG + 1e-9, 180.0)
}

/// Builds a labeled triplet around a fixed reference (pool index).
pub fn triplet_for_reference<R: Rng + ?Sized>(
    pool: &LabeledPool,
    reference: usize,
    schedule: &CurriculumSchedule,
    triplet_index: u64,
    rng: &mut R,
) -> Result<TripletSpec> {
    let ref_item = pool.items.get(reference).ok_or(Error::IndexOutOfRange {
        index: reference,
        max: pool.len().saturating_sub(1),
    })?;
    let members = pool.class_members(ref_item.class_id);
    let positives: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&i| i != reference && angular_distance(pool.items[i].azimuth, ref_item.azimuth) <= POSITIVE_RADIUS_DEG)
        .collect();
    let &pos = positives.choose(rng).ok_or_else(|| {
        Error::InsufficientPool(format!(
            "no sample of class {} within {POSITIVE_RADIUS_DEG}° of {:.3}°",
            ref_item.class_id,
            ref_item.azimuth.value()
        ))
    })?;

    let offset = draw_offset(schedule.gaussian(schedule.phase_at(triplet_index)), rng);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let target = ref_item.azimuth.add(sign * offset);
    let neg = members
        .iter()
        .copied()
        .filter(|&i| i != reference && i != pos)
        .min_by(|&a, &b| {
            angular_distance(pool.items[a].azimuth, target).total_cmp(&angular_distance(pool.items[b].azimuth, target))
        })
        .ok_or_else(|| Error::InsufficientPool(format!("class {} has fewer than 3 samples", ref_item.class_id)))?;

    Ok(TripletSpec {
        reference: ref_item.sample_id,
        positive: pool.items[pos].sample_id,
        negative: pool.items[neg].sample_id,
        provenance: Provenance::Labeled,
    })
}

/// Uniform class, uniform reference within it, curriculum negative.
pub fn sample_labeled_triplet<R: Rng + ?Sized>(
    pool: &LabeledPool,
    schedule: &CurriculumSchedule,
    triplet_index: u64,
    rng: &mut R,
) -> Result<TripletSpec> {
    let classes: Vec<u32> = pool
        .by_class
        .iter()
        .filter(|(_, m)| m.len() >= 3)
        .map(|(c, _)| *c)
        .collect();
    let &class = classes
        .choose(rng)
        .ok_or_else(|| Error::InsufficientPool("no class with at least 3 samples".into()))?;
    let &reference = pool.class_members(class).choose(rng).expect("nonempty class");
    triplet_for_reference(pool, reference, schedule, triplet_index, rng)
}

/// Uniformly random labeled sample to stand in for the flip term of a video
/// triplet, optionally restricted to one class.
pub fn substitute_flip_sample<R: Rng + ?Sized>(pool: &LabeledPool, class_id: Option<u32>, rng: &mut R) -> Result<u64> {
    let idx = match class_id {
        Some(c) => pool.class_members(c).choose(rng).copied(),
        None => (!pool.is_empty()).then(|| rng.random_range(0..pool.len())),
    };
    idx.map(|i| pool.items[i].sample_id).ok_or(Error::EmptyPool)
}

/// An unlabeled clip of a rotating object. True azimuths exist only so that
/// frames can be rendered; triplets built from it never carry them.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: u32,
    pub class_id: u32,
    /// Frame offset between reference and negative.
    pub negative_gap: usize,
    azimuths: Vec<AzimuthDeg>,
}

impl VideoSequence {
    pub fn new(id: u32, class_id: u32, azimuths: Vec<AzimuthDeg>, negative_gap: usize) -> Result<Self> {
        if azimuths.len() < 3 {
            return Err(Error::OutOfRange(format!("sequence needs at least 3 frames, got {}", azimuths.len())));
        }
        if negative_gap < 2 || negative_gap >= azimuths.len() {
            return Err(Error::OutOfRange(format!(
                "negative gap {negative_gap} must be in 2..{}",
                azimuths.len()
            )));
        }
        Ok(Self {
            id,
            class_id,
            negative_gap,
            azimuths,
        })
    }

    /// Object turning steadily in one direction, each step drawn from
    /// `[max_step/2, max_step]` degrees.
    pub fn simulate<R: Rng + ?Sized>(
        id: u32,
        class_id: u32,
        frames: usize,
        max_step_deg: f64,
        negative_gap: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut az = AzimuthDeg::new(rng.random_range(0.0..360.0));
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut azimuths = Vec::with_capacity(frames);
        for _ in 0..frames {
            azimuths.push(az);
            az = az.add(dir * rng.random_range(0.5 * max_step_deg..=max_step_deg));
        }
        Self::new(id, class_id, azimuths, negative_gap)
    }

    pub fn len(&self) -> usize {
        self.azimuths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.azimuths.is_empty()
    }

    /// Largest reference index that leaves room for the negative.
    pub fn last_reference(&self) -> usize {
        self.len() - 1 - self.negative_gap
    }

    /// Azimuth used to render a frame. Not for training targets.
    pub fn frame_azimuth(&self, frame: usize) -> Option<AzimuthDeg> {
        self.azimuths.get(frame).copied()
    }

    pub fn triplet_at(&self, reference: usize) -> Result<TripletSpec> {
        if reference > self.last_reference() {
            return Err(Error::IndexOutOfRange {
                index: reference,
                max: self.last_reference(),
            });
        }
        Ok(TripletSpec {
            reference: reference as u64,
            positive: reference as u64 + 1,
            negative: (reference + self.negative_gap) as u64,
            provenance: Provenance::Video { sequence: self.id },
        })
    }
}

/// Adjacent frame as positive, `negative_gap` frames later as negative.
pub fn sample_video_triplet<R: Rng + ?Sized>(seq: &VideoSequence, rng: &mut R) -> TripletSpec {
    let reference = rng.random_range(0..=seq.last_reference());
    seq.triplet_at(reference).expect("reference in range")
}

/// A sampler owning its seeded generator and triplet counter.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    pool: LabeledPool,
    schedule: CurriculumSchedule,
    rng: ChaCha8Rng,
    drawn: u64,
}

impl TripletSampler {
    pub fn new(pool: LabeledPool, schedule: CurriculumSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            pool,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drawn: 0,
        })
    }

    pub fn drawn(&self) -> u64 {
        self.drawn
    }

    pub fn phase(&self) -> CurriculumPhase {
        self.schedule.phase_at(self.drawn)
    }

    pub fn next_labeled(&mut self) -> Result<TripletSpec> {
        let t = sample_labeled_triplet(&self.pool, &self.schedule, self.drawn, &mut self.rng)?;
        self.drawn += 1;
        Ok(t)
    }

    pub fn next_video(&mut self, seq: &VideoSequence) -> TripletSpec {
        sample_video_triplet(seq, &mut self.rng)
    }

    pub fn flip_substitute(&mut self, class_id: Option<u32>) -> Result<u64> {
        substitute_flip_sample(&self.pool, class_id, &mut self.rng)
    }
}

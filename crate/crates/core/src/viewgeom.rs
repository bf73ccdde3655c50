//! Circular azimuth arithmetic and viewpoint discretization.
//!
//! Azimuths are kept as real degrees and only discretized when a class
//! (1° wide) or an evaluation bin (360/K degrees wide) is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of 1° azimuth classes.
pub const NUM_CLASSES: usize = 360;

/// Default number of evaluation bins (15° each).
pub const DEFAULT_BINS: usize = 24;

/// Azimuth in degrees, always normalized to `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(into = "f64", try_from = "f64")]
pub struct AzimuthDeg(f64);

impl AzimuthDeg {
    /// Wraps any finite angle into `[0, 360)`.
    pub fn new(deg: f64) -> Self {
        let mut v = deg.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        if v >= 360.0 {
            v = 0.0;
        }
        Self(v)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// 1° class containing this azimuth.
    pub fn class(self) -> ClassIndex {
        ClassIndex((self.0.floor() as usize).min(NUM_CLASSES - 1))
    }

    pub fn add(self, delta: f64) -> Self {
        Self::new(self.0 + delta)
    }
}

impl From<AzimuthDeg> for f64 {
    fn from(a: AzimuthDeg) -> f64 {
        a.0
    }
}

impl TryFrom<f64> for AzimuthDeg {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        if !(0.0..360.0).contains(&v) {
            return Err(Error::OutOfRange(format!("azimuth {v} not in [0, 360)")));
        }
        Ok(Self(v))
    }
}

/// Index of a 1° azimuth class, in `0..360`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassIndex(usize);

impl ClassIndex {
    pub fn new(k: usize) -> Result<Self> {
        if k >= NUM_CLASSES {
            return Err(Error::OutOfRange(format!("class index {k} not in 0..360")));
        }
        Ok(Self(k))
    }

    /// Wraps any integer onto the circle of classes.
    pub fn wrapping(k: i64) -> Self {
        Self(k.rem_euclid(NUM_CLASSES as i64) as usize)
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn azimuth(self) -> AzimuthDeg {
        AzimuthDeg(self.0 as f64)
    }

    pub fn flip(self) -> Self {
        Self((NUM_CLASSES - self.0) % NUM_CLASSES)
    }
}

/// Index of an evaluation bin, in `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BinIndex(pub usize);

impl BinIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

/// Where bin boundaries sit on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinConvention {
    /// Bin 0 is centered on 0°, i.e. covers `[-w/2, w/2)`.
    #[default]
    Centered,
    /// Bin 0 starts at 0°, i.e. covers `[0, w)`.
    Edge,
}

impl std::str::FromStr for BinConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Self::Centered),
            "edge" => Ok(Self::Edge),
            other => Err(Error::Config(format!("unknown bin convention `{other}`"))),
        }
    }
}

/// A partition of the 360 classes into `count` evaluation bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinScheme {
    pub count: usize,
    pub convention: BinConvention,
}

impl Default for BinScheme {
    fn default() -> Self {
        Self {
            count: DEFAULT_BINS,
            convention: BinConvention::Centered,
        }
    }
}

impl BinScheme {
    pub fn new(count: usize, convention: BinConvention) -> Result<Self> {
        if count == 0 || count > NUM_CLASSES {
            return Err(Error::OutOfRange(format!("bin count {count} not in 1..=360")));
        }
        Ok(Self { count, convention })
    }

    pub fn width(&self) -> f64 {
        360.0 / self.count as f64
    }

    pub fn class_to_bin(&self, k: ClassIndex) -> BinIndex {
        let w = self.width();
        let k = k.get() as f64;
        let pos = match self.convention {
            BinConvention::Centered => (k + w / 2.0).rem_euclid(360.0),
            BinConvention::Edge => k,
        };
        BinIndex(((pos / w).floor() as usize).min(self.count - 1))
    }

    pub fn azimuth_to_bin(&self, a: AzimuthDeg) -> BinIndex {
        self.class_to_bin(a.class())
    }

    /// Lookup table from class index to bin index.
    pub fn class_table(&self) -> [usize; NUM_CLASSES] {
        let mut table = [0usize; NUM_CLASSES];
        for (k, slot) in table.iter_mut().enumerate() {
            *slot = self.class_to_bin(ClassIndex(k)).get();
        }
        table
    }
}

/// Centered 24-bin discretization of a class.
pub fn class_to_bin(k: ClassIndex) -> BinIndex {
    BinScheme::default().class_to_bin(k)
}

/// Shortest distance around the circle, in `[0, 180]`.
pub fn angular_distance(a: AzimuthDeg, b: AzimuthDeg) -> f64 {
    let d = (a.0 - b.0).abs();
    d.min(360.0 - d)
}

/// Azimuth of the horizontally mirrored view.
pub fn flip_azimuth(a: AzimuthDeg) -> AzimuthDeg {
    AzimuthDeg::new(360.0 - a.0)
}

/// Reindexes a per-angle vector so that entry `k` moves to `(360 - k) mod 360`.
pub fn flip_slice(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|k| v[(n - k) % n]).collect()
}

/// Nonnegative score vector over the 360 azimuth classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointDistribution {
    q: Vec<f64>,
}

impl ViewpointDistribution {
    /// Tolerance on the total mass of a normalized distribution.
    pub const NORM_TOL: f64 = 1e-9;

    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.len() != NUM_CLASSES {
            return Err(Error::DimensionMismatch {
                expected: NUM_CLASSES,
                got: q.len(),
            });
        }
        if let Some(bad) = q.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::OutOfRange(format!("viewpoint score {bad} is not a finite nonnegative number")));
        }
        Ok(Self { q })
    }

    pub fn uniform() -> Self {
        Self {
            q: vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    pub fn delta(k: ClassIndex) -> Self {
        let mut q = vec![0.0; NUM_CLASSES];
        q[k.get()] = 1.0;
        Self { q }
    }

    /// Numerically stable softmax of a logit vector.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_CLASSES {
            return Err(Error::DimensionMismatch {
                expected: NUM_CLASSES,
                got: logits.len(),
            });
        }
        Ok(Self { q: softmax(logits) })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.q
    }

    pub fn sum(&self) -> f64 {
        self.q.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.sum() - 1.0).abs() <= Self::NORM_TOL
    }

    /// Copy rescaled to unit mass; `None` if the mass is zero.
    pub fn normalized(&self) -> Option<Self> {
        let s = self.sum();
        (s > 0.0).then(|| Self {
            q: self.q.iter().map(|x| x / s).collect(),
        })
    }

    /// Class with the largest entry, lowest index on ties.
    pub fn argmax(&self) -> ClassIndex {
        let mut best = 0;
        for (k, &x) in self.q.iter().enumerate() {
            if x > self.q[best] {
                best = k;
            }
        }
        ClassIndex(best)
    }
}

/// Mirror of a viewpoint distribution: `out[k] = q[(360 - k) mod 360]`.
pub fn flip_distribution(q: &ViewpointDistribution) -> ViewpointDistribution {
    ViewpointDistribution { q: flip_slice(&q.q) }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn az(v: f64) -> AzimuthDeg {
        AzimuthDeg::new(v)
    }

    #[test]
    fn angular_distance_examples() {
        assert_eq!(angular_distance(az(10.0), az(350.0)), 20.0);
        assert_eq!(angular_distance(az(90.0), az(90.0)), 0.0);
        assert_eq!(angular_distance(az(0.0), az(180.0)), 180.0);
    }

    #[test]
    fn flip_azimuth_examples() {
        assert_eq!(flip_azimuth(az(90.0)).value(), 270.0);
        assert_eq!(flip_azimuth(az(0.0)).value(), 0.0);
        assert_eq!(flip_azimuth(az(180.0)).value(), 180.0);
    }

    #[test]
    fn flip_distribution_examples() {
        let d = flip_distribution(&ViewpointDistribution::delta(ClassIndex::new(30).unwrap()));
        assert_eq!(d.argmax().get(), 330);
        assert_eq!(d.as_slice()[330], 1.0);
        let u = ViewpointDistribution::uniform();
        assert_eq!(flip_distribution(&u), u);
        let z = ViewpointDistribution::delta(ClassIndex::new(0).unwrap());
        assert_eq!(flip_distribution(&z), z);
    }

    #[test]
    fn class_to_bin_examples() {
        let b = |k| class_to_bin(ClassIndex::new(k).unwrap()).get();
        assert_eq!(b(0), 0);
        assert_eq!(b(8), 1);
        assert_eq!(b(355), 0);
        assert_eq!(b(7), 0);
        assert_eq!(b(353), 0);
        assert_eq!(b(352), 23);
    }

    #[test]
    fn edge_bins() {
        let s = BinScheme::new(24, BinConvention::Edge).unwrap();
        assert_eq!(s.class_to_bin(ClassIndex::new(0).unwrap()).get(), 0);
        assert_eq!(s.class_to_bin(ClassIndex::new(14).unwrap()).get(), 0);
        assert_eq!(s.class_to_bin(ClassIndex::new(15).unwrap()).get(), 1);
        assert_eq!(s.class_to_bin(ClassIndex::new(359).unwrap()).get(), 23);
    }

    #[test]
    fn every_bin_has_fifteen_classes() {
        for conv in [BinConvention::Centered, BinConvention::Edge] {
            let table = BinScheme::new(24, conv).unwrap().class_table();
            let mut counts = [0usize; 24];
            for b in table {
                counts[b] += 1;
            }
            assert!(counts.iter().all(|&c| c == 15), "{conv:?}: {counts:?}");
        }
    }

    #[test]
    fn flip_distance_on_grid() {
        for i in 0..=1800 {
            let a = i as f64 / 10.0;
            let expected = (2.0 * a).min(360.0 - 2.0 * a);
            let got = angular_distance(az(a), flip_azimuth(az(a)));
            assert!((got - expected).abs() < 1e-9, "a={a}: {got} vs {expected}");
        }
    }

    #[test]
    fn normalization_is_total() {
        assert_eq!(az(-1e-20).value(), 0.0);
        assert_eq!(az(720.0).value(), 0.0);
        assert_eq!(az(-90.0).value(), 270.0);
        assert!(AzimuthDeg::try_from(360.0).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(ViewpointDistribution::new(vec![0.0; 10]).is_err());
        let mut q = vec![0.0; 360];
        q[3] = -1.0;
        assert!(ViewpointDistribution::new(q).is_err());
    }

    proptest! {
        #[test]
        fn azimuth_in_range(v in -1e6f64..1e6) {
            let a = az(v).value();
            prop_assert!((0.0..360.0).contains(&a));
        }

        #[test]
        fn distance_symmetric_and_bounded(a in 0f64..360.0, b in 0f64..360.0) {
            let d = angular_distance(az(a), az(b));
            prop_assert!((0.0..=180.0).contains(&d));
            prop_assert_eq!(d, angular_distance(az(b), az(a)));
        }

        #[test]
        fn distance_triangle(a in 0f64..360.0, b in 0f64..360.0, c in 0f64..360.0) {
            let (a, b, c) = (az(a), az(b), az(c));
            prop_assert!(angular_distance(a, c) <= angular_distance(a, b) + angular_distance(b, c) + 1e-9);
        }

        #[test]
        fn flip_azimuth_involution(ticks in 0u32..360 * 1024) {
            // dyadic grid: 360 - a is exact there
            let a = az(ticks as f64 / 1024.0);
            prop_assert_eq!(flip_azimuth(flip_azimuth(a)), a);
        }

        #[test]
        fn flip_distribution_involution(q in proptest::collection::vec(0f64..10.0, 360)) {
            let d = ViewpointDistribution::new(q).unwrap();
            let f = flip_distribution(&d);
            prop_assert!((f.sum() - d.sum()).abs() < 1e-9);
            prop_assert_eq!(flip_distribution(&f), d);
        }
    }
}

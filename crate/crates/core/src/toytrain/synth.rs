//! Synthetic stand-in for rendered and real images: Fourier features of the
//! azimuth, optionally folded onto their 180° alias, pushed through a fixed
//! random projection and perturbed with Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{LabeledPool, PoolItem};
use crate::viewgeom::{flip_azimuth, AzimuthDeg};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGenerator {
    pub class_count: u32,
    pub feature_dim: usize,
    pub fourier_orders: Vec<u32>,
    /// Per class, in `[0, 1]`; 1 makes the features exactly 180°-periodic.
    pub symmetry: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticGenerator {
    fn default() -> Self {
        Self {
            class_count: 1,
            feature_dim: 32,
            fourier_orders: vec![1, 2, 3, 4],
            symmetry: vec![0.0],
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// One labeled image and its horizontal mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub class_id: u32,
    pub azimuth: AzimuthDeg,
    pub features: Vec<f64>,
    pub flipped: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pool(&self) -> LabeledPool {
        LabeledPool::new(
            self.samples
                .iter()
                .map(|s| PoolItem {
                    sample_id: s.id,
                    class_id: s.class_id,
                    azimuth: s.azimuth,
                })
                .collect(),
        )
    }

    /// Samples of one class, ids preserved.
    pub fn of_class(&self, class_id: u32) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            samples: self.samples.iter().filter(|s| s.class_id == class_id).cloned().collect(),
        }
    }

    pub fn by_id(&self, id: u64) -> Option<&Sample> {
        // ids are assigned in order, so try the direct slot first
        match self.samples.get(id as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.samples.iter().find(|s| s.id == id),
        }
    }
}

/// Stream used for the training split.
pub const TRAIN_STREAM: u64 = 0;
/// Stream used for the held-out split.
pub const TEST_STREAM: u64 = 1;
/// Stream for noiseless "rendered" pretraining data.
pub const RENDERED_STREAM: u64 = 2;
/// Stream for simulated video sequences.
pub const VIDEO_STREAM: u64 = 3;

impl SyntheticGenerator {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if self.fourier_orders.is_empty() || self.fourier_orders.contains(&0) {
            return Err(Error::Config("fourier_orders must be nonempty positive integers".into()));
        }
        if self.feature_dim < 2 * self.fourier_orders.len() {
            return Err(Error::Config(format!(
                "feature_dim {} must be at least twice the number of Fourier orders ({})",
                self.feature_dim,
                self.fourier_orders.len()
            )));
        }
        if self.symmetry.len() != self.class_count as usize {
            return Err(Error::Config(format!(
                "symmetry needs one entry per class ({}), got {}",
                self.class_count,
                self.symmetry.len()
            )));
        }
        if self.symmetry.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("symmetry entries must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    fn base_dim(&self) -> usize {
        2 * self.fourier_orders.len()
    }

    /// Fixed per-class projection from Fourier space to feature space
    /// (row-major, `feature_dim x base_dim`), derived from the seed only.
    pub fn projection(&self, class_id: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f7e47);
        rng.set_stream(1000 + class_id as u64);
        let std = (1.0 / self.fourier_orders.len() as f64).sqrt();
        (0..self.feature_dim * self.base_dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
            .collect()
    }

    fn fourier(&self, azimuth: f64) -> Vec<f64> {
        let t = azimuth.to_radians();
        self.fourier_orders
            .iter()
            .flat_map(|&k| {
                let a = k as f64 * t;
                [a.cos(), a.sin()]
            })
            .collect()
    }

    /// Noise-free feature vector of `class_id` seen at `azimuth`.
    pub fn clean_features(&self, class_id: u32, azimuth: AzimuthDeg, projection: &[f64]) -> Vec<f64> {
        let s = self.symmetry[class_id as usize];
        let direct = self.fourier(azimuth.value());
        let alias = self.fourier(azimuth.value() + 180.0);
        let mixed: Vec<f64> = direct
            .iter()
            .zip(&alias)
            .map(|(d, a)| (1.0 - 0.5 * s) * d + 0.5 * s * a)
            .collect();
        let m = self.base_dim();
        (0..self.feature_dim)
            .map(|i| projection[i * m..(i + 1) * m].iter().zip(&mixed).map(|(p, x)| p * x).sum())
            .collect()
    }

    /// Features with noise drawn from `rng`.
    pub fn render<R: Rng + ?Sized>(
        &self,
        class_id: u32,
        azimuth: AzimuthDeg,
        projection: &[f64],
        noise_std: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let mut f = self.clean_features(class_id, azimuth, projection);
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("nonnegative std");
            for x in &mut f {
                *x += normal.sample(rng);
            }
        }
        f
    }

    /// `n` samples, classes assigned round-robin, azimuths uniform.
    pub fn generate_split(&self, n: usize, stream: u64, noise_std: f64) -> Result<Dataset> {
        self.validate()?;
        let projections: Vec<Vec<f64>> = (0..self.class_count).map(|c| self.projection(c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let samples = (0..n)
            .map(|i| {
                let class_id = (i % self.class_count as usize) as u32;
                let azimuth = AzimuthDeg::new(rng.random_range(0.0..360.0));
                let p = &projections[class_id as usize];
                let features = self.render(class_id, azimuth, p, noise_std, &mut rng);
                let flipped = self.render(class_id, flip_azimuth(azimuth), p, noise_std, &mut rng);
                Sample {
                    id: i as u64,
                    class_id,
                    azimuth,
                    features,
                    flipped,
                }
            })
            .collect();
        Ok(Dataset {
            feature_dim: self.feature_dim,
            samples,
        })
    }
}

/// `n` training samples at the generator's noise level.
pub fn generate_dataset(gen: &SyntheticGenerator, n: usize) -> Result<Dataset> {
    gen.generate_split(n, TRAIN_STREAM, gen.noise_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(symmetry: f64, noise: f64, seed: u64) -> SyntheticGenerator {
        SyntheticGenerator {
            symmetry: vec![symmetry],
            noise_std: noise,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn full_symmetry_is_half_periodic() {
        let g = gen(1.0, 0.05, 1);
        let p = g.projection(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a = AzimuthDeg::new(rng.random_range(0.0..360.0));
            let d: f64 = g
                .clean_features(0, a, &p)
                .iter()
                .zip(g.clean_features(0, a.add(180.0), &p))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
        // noise floor: expected norm of a noise vector of this dimension
        let floor = g.noise_std * (g.feature_dim as f64).sqrt();
        assert!(worst < 1e-12 && worst < floor, "{worst}");

        let asym = gen(0.0, 0.0, 1);
        let a = AzimuthDeg::new(30.0);
        let d: f64 = asym
            .clean_features(0, a, &p)
            .iter()
            .zip(asym.clean_features(0, a.add(180.0), &p))
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(d > 1.0);
    }

    #[test]
    fn noiseless_rendering_is_deterministic() {
        let g = gen(0.3, 0.0, 2);
        let p = g.projection(0);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = AzimuthDeg::new(123.4);
        assert_eq!(g.render(0, a, &p, 0.0, &mut r1), g.render(0, a, &p, 0.0, &mut r2));
    }

    #[test]
    fn seeds_change_dataset() {
        let a = generate_dataset(&gen(0.0, 0.05, 1), 50).unwrap();
        let b = generate_dataset(&gen(0.0, 0.05, 2), 50).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, generate_dataset(&gen(0.0, 0.05, 1), 50).unwrap());
    }

    #[test]
    fn splits_share_projection() {
        let g = gen(0.0, 0.0, 4);
        let train = g.generate_split(5, TRAIN_STREAM, 0.0).unwrap();
        let test = g.generate_split(5, TEST_STREAM, 0.0).unwrap();
        assert_ne!(train.samples[0].azimuth, test.samples[0].azimuth);
        let p = g.projection(0);
        let s = &test.samples[0];
        assert_eq!(s.features, g.clean_features(0, s.azimuth, &p));
    }

    #[test]
    fn validation() {
        let g = SyntheticGenerator {
            feature_dim: 7,
            ..Default::default()
        };
        assert!(g.validate().is_err());
        let g = SyntheticGenerator {
            symmetry: vec![0.0, 1.0],
            ..Default::default()
        };
        assert!(g.validate().is_err());
        assert!(SyntheticGenerator::default().validate().is_ok());
    }

    #[test]
    fn round_robin_classes() {
        let g = SyntheticGenerator {
            class_count: 3,
            symmetry: vec![0.0, 0.5, 1.0],
            ..Default::default()
        };
        let d = generate_dataset(&g, 9).unwrap();
        assert_eq!(d.samples.iter().map(|s| s.class_id).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_eq!(d.by_id(4).unwrap().class_id, 1);
        assert_eq!(d.of_class(2).len(), 3);
        assert_eq!(d.pool().len(), 9);
    }
}

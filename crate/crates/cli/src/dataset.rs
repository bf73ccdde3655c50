//! Conversion between in-memory toy datasets and their files.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use viewpoint_core::aggregate::BoundingBox;
use viewpoint_core::toytrain::synth::{TEST_STREAM, TRAIN_STREAM};
use viewpoint_core::toytrain::{ground_truth_box, Dataset, Sample};
use viewpoint_core::viewgeom::AzimuthDeg;

use crate::config::{annotation_path, feature_path, RunConfig};
use crate::features::{load_features, save_features, FeatureRecord};
use crate::records::{read_jsonl, write_jsonl, AnnotationRecord};

pub const SPLITS: [(&str, u64); 2] = [("train", TRAIN_STREAM), ("test", TEST_STREAM)];

/// A split as read back from disk; `dataset.samples[i]` describes
/// `annotations[i]`.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub dataset: Dataset,
    pub annotations: Vec<AnnotationRecord>,
}

impl LoadedSplit {
    pub fn gt_box(&self, i: usize) -> BoundingBox {
        let b = self.annotations[i].bbox;
        BoundingBox {
            x: b[0],
            y: b[1],
            w: b[2],
            h: b[3],
        }
    }
}

/// Generates one split and writes its annotation and feature files.
pub fn write_split(cfg: &RunConfig, dir: &Path, split: &str, stream: u64) -> Result<usize> {
    let gen = cfg.generator();
    let n = match split {
        "train" => cfg.generator.train_samples,
        _ => cfg.generator.test_samples,
    };
    let data = gen.generate_split(n, stream, gen.noise_std)?;
    let mut annotations = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for s in &data.samples {
        let image = format!("{split}{:06}", s.id);
        let b = ground_truth_box(s.id, cfg.seed ^ stream);
        annotations.push(AnnotationRecord {
            image: image.clone(),
            class: cfg.generator.classes[s.class_id as usize].clone(),
            bbox: [b.x, b.y, b.w, b.h],
            azimuth: s.azimuth.value(),
            difficult: false,
        });
        features.push(FeatureRecord {
            image,
            features: s.features.clone(),
            flipped: s.flipped.clone(),
        });
    }
    write_jsonl(&annotation_path(dir, split), &annotations)?;
    save_features(&feature_path(dir, split), gen.feature_dim, &features)?;
    Ok(n)
}

/// Joins a split's annotations with its features by image id.
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<LoadedSplit> {
    let dir = cfg.data_dir();
    let ann_path = annotation_path(dir, split);
    let annotations: Vec<AnnotationRecord> = read_jsonl(&ann_path)?;
    let feat_path = feature_path(dir, split);
    let (dim, feats) = load_features(&feat_path)?;
    if dim != cfg.generator.feature_dim {
        bail!(
            "{}: feature dimension {dim} differs from generator.feature_dim {}",
            feat_path.display(),
            cfg.generator.feature_dim
        );
    }
    let mut by_image: HashMap<String, FeatureRecord> = HashMap::with_capacity(feats.len());
    for f in feats {
        let name = f.image.clone();
        if by_image.insert(name.clone(), f).is_some() {
            bail!("{}: duplicate image `{name}`", feat_path.display());
        }
    }
    let mut samples = Vec::with_capacity(annotations.len());
    for (i, a) in annotations.iter().enumerate() {
        let f = by_image
            .remove(&a.image)
            .with_context(|| format!("{}: no features for image `{}`", feat_path.display(), a.image))?;
        samples.push(Sample {
            id: i as u64,
            class_id: cfg.class_index(&a.class).with_context(|| ann_path.display().to_string())?,
            azimuth: AzimuthDeg::new(a.azimuth),
            features: f.features,
            flipped: f.flipped,
        });
    }
    Ok(LoadedSplit {
        dataset: Dataset {
            feature_dim: dim,
            samples,
        },
        annotations,
    })
}

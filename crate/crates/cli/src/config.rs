//! TOML run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use viewpoint_core::avp::AvpOptions;
use viewpoint_core::losses::{ContrastiveParams, DistanceMode, FlipParams, GeometricLossParams};
use viewpoint_core::sampler::CurriculumSchedule;
use viewpoint_core::toytrain::{
    BinSelection, DetectionJitter, LossConfig, LossSettings, PhaseBudget, SyntheticGenerator, TrainConfig,
    VideoSettings,
};
use viewpoint_core::viewgeom::{BinConvention, BinScheme, DEFAULT_BINS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub loss: LossConfig,
    /// Multiplies every phase budget and the curriculum boundary.
    pub schedule_scale: f64,
    pub bins: BinConvention,
    pub distance: DistanceMode,
    pub out: PathBuf,
    pub data: DataSection,
    pub generator: GeneratorSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossConfig::Geometric,
            schedule_scale: 0.005,
            bins: BinConvention::Centered,
            distance: DistanceMode::Circular,
            out: PathBuf::from("run"),
            data: DataSection::default(),
            generator: GeneratorSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding the synthesized dataset; defaults to `out`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub classes: Vec<String>,
    /// One entry per class.
    pub symmetry: Vec<f64>,
    pub feature_dim: usize,
    pub fourier_orders: Vec<u32>,
    pub noise_std: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = SyntheticGenerator::default();
        Self {
            classes: vec!["object".into()],
            symmetry: g.symmetry,
            feature_dim: g.feature_dim,
            fourier_orders: g.fourier_orders,
            noise_std: g.noise_std,
            train_samples: 2000,
            test_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub head_lr_factor: f64,
    pub hidden_dim: usize,
    pub log_interval: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub budget: PhaseBudget,
    pub curriculum: CurriculumSchedule,
    pub geometric: GeometricLossParams,
    pub contrastive: ContrastiveParams,
    pub flip: FlipParams,
    pub viewpoint_lambda: f64,
    pub video: VideoSettings,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            head_lr_factor: t.head_lr_factor,
            hidden_dim: t.hidden_dim,
            log_interval: 10,
            checkpoint_interval: 0,
            budget: t.budget,
            curriculum: t.curriculum,
            geometric: t.losses.geometric,
            contrastive: t.losses.contrastive,
            flip: t.losses.flip,
            viewpoint_lambda: t.losses.viewpoint_lambda,
            video: t.video,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Overlap of each synthesized prediction box with its ground truth.
    pub box_iou: f64,
    pub class_score: f64,
    pub iou_threshold: f64,
    pub selection: BinSelection,
    pub bin_count: usize,
    pub wrong_bin_consumes: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            box_iou: 1.0,
            class_score: 1.0,
            iou_threshold: 0.5,
            selection: BinSelection::Integral,
            bin_count: DEFAULT_BINS,
            wrong_bin_consumes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub losses: Vec<LossConfig>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            losses: LossConfig::ALL.to_vec(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bins: Option<BinConvention>,
    pub distance: Option<DistanceMode>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            // type errors only carry a span, so quote the offending line to name the key
            match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    let source = text.lines().nth(line - 1).unwrap_or("").trim();
                    anyhow::anyhow!("invalid config at line {line} (`{source}`): {}", e.message())
                }
                None => anyhow::anyhow!("invalid config: {}", e.message()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, else starts from defaults; then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(b) = overrides.bins {
            cfg.bins = b;
        }
        if let Some(d) = overrides.distance {
            cfg.distance = d;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if g.classes.is_empty() {
            bail!("generator.classes must name at least one class");
        }
        let mut names = g.classes.clone();
        names.sort();
        names.dedup();
        if names.len() != g.classes.len() {
            bail!("generator.classes contains duplicates");
        }
        self.generator().validate().context("generator")?;
        self.train_config(self.loss).validate().context("train")?;
        self.bin_scheme().context("eval.bin_count")?;
        if !(self.eval.box_iou > 0.0 && self.eval.box_iou <= 1.0) {
            bail!("eval.box_iou must lie in (0, 1]");
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            bail!("eval.iou_threshold must lie in (0, 1]");
        }
        if self.ablate.losses.is_empty() {
            bail!("ablate.losses must not be empty");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> &Path {
        self.data.dir.as_deref().unwrap_or(&self.out)
    }

    /// Fails unless every dataset file a training run reads is present.
    pub fn require_inputs(&self) -> Result<()> {
        for split in ["train", "test"] {
            for path in [annotation_path(self.data_dir(), split), feature_path(self.data_dir(), split)] {
                if !path.is_file() {
                    bail!("data.dir: missing {}", path.display());
                }
            }
        }
        Ok(())
    }

    pub fn generator(&self) -> SyntheticGenerator {
        let g = &self.generator;
        SyntheticGenerator {
            class_count: g.classes.len() as u32,
            feature_dim: g.feature_dim,
            fourier_orders: g.fourier_orders.clone(),
            symmetry: g.symmetry.clone(),
            noise_std: g.noise_std,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, loss: LossConfig) -> TrainConfig {
        let t = &self.train;
        let geometric = GeometricLossParams {
            distance: self.distance,
            ..t.geometric
        };
        TrainConfig {
            loss,
            seed: self.seed,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            head_lr_factor: t.head_lr_factor,
            hidden_dim: t.hidden_dim,
            schedule_scale: self.schedule_scale,
            budget: t.budget,
            log_interval: t.log_interval,
            curriculum: t.curriculum,
            losses: LossSettings {
                geometric,
                contrastive: t.contrastive,
                flip: FlipParams { geom: geometric, ..t.flip },
                viewpoint_lambda: t.viewpoint_lambda,
            },
            video: t.video,
        }
    }

    pub fn bin_scheme(&self) -> Result<BinScheme> {
        Ok(BinScheme::new(self.eval.bin_count, self.bins)?)
    }

    pub fn avp_options(&self) -> Result<AvpOptions> {
        Ok(AvpOptions {
            iou_threshold: self.eval.iou_threshold,
            bins: self.bin_scheme()?,
            wrong_bin_consumes: self.eval.wrong_bin_consumes,
            ignore_viewpoint: false,
        })
    }

    pub fn jitter(&self) -> DetectionJitter {
        DetectionJitter {
            iou: self.eval.box_iou,
            class_score: self.eval.class_score,
            seed: self.seed,
        }
    }

    /// Digest of every setting except the seed and output location.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            seed: 0,
            out: PathBuf::new(),
            data: DataSection::default(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn class_index(&self, name: &str) -> Result<u32> {
        self.generator
            .classes
            .iter()
            .position(|c| c == name)
            .map(|i| i as u32)
            .with_context(|| format!("class `{name}` is not listed in generator.classes"))
    }
}

pub fn annotation_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn feature_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.features.bin"))
}

//! Versioned JSON checkpoints. Floats survive a round trip bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::viewgeom::NUM_CLASSES;

use super::trainer::{LogRow, TrainerState};

pub const CHECKPOINT_FORMAT: &str = "viewpoint-toy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: Shape,
    /// Opaque digest of the run configuration; resuming under a different
    /// configuration is refused.
    pub config_fingerprint: String,
    pub class_id: u32,
    pub state: TrainerState,
    /// Log rows emitted so far, so a resumed run can reproduce the full log.
    #[serde(default)]
    pub log: Vec<LogRow>,
}

impl Checkpoint {
    pub fn new(state: TrainerState, class_id: u32, config_fingerprint: impl Into<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            shape: Shape {
                input_dim: state.model.input_dim,
                hidden_dim: state.model.hidden_dim,
                classes: NUM_CLASSES,
            },
            config_fingerprint: config_fingerprint.into(),
            class_id,
            state,
            log: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        let m = &self.state.model;
        if self.shape.classes != NUM_CLASSES || self.shape.input_dim != m.input_dim || self.shape.hidden_dim != m.hidden_dim {
            return Err(Error::Format("checkpoint shape header disagrees with its weights".into()));
        }
        m.validate()?;
        self.state.optimizer.validate(m)
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(r)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytrain::model::{OptimizerState, ToyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state() -> TrainerState {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ToyModel::xavier(8, 6, &mut rng);
        let mut optimizer = OptimizerState::new(&model, 1e-4);
        for t in optimizer.v.tensors_mut() {
            for x in t {
                // awkward magnitudes exercise the float printer
                *x = rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300));
            }
        }
        optimizer.t = 17;
        TrainerState {
            model,
            optimizer,
            step: 17,
            triplets_drawn: 40,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = Checkpoint::new(state(), 2, "abc");
        let mut buf = Vec::new();
        c.to_writer(&mut buf).unwrap();
        let back = Checkpoint::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.state.optimizer.v.tensors().iter().zip(c.state.optimizer.v.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let mut c = Checkpoint::new(state(), 0, "");
        c.version = 9;
        let buf = serde_json::to_vec(&c).unwrap();
        assert!(matches!(Checkpoint::from_reader(buf.as_slice()), Err(Error::Format(_))));
        let mut c = Checkpoint::new(state(), 0, "");
        c.shape.hidden_dim = 7;
        let buf = serde_json::to_vec(&c).unwrap();
        assert!(matches!(Checkpoint::from_reader(buf.as_slice()), Err(Error::Format(_))));
        let mut c = Checkpoint::new(state(), 0, "");
        c.state.model.w1.pop();
        let buf = serde_json::to_vec(&c).unwrap();
        assert!(Checkpoint::from_reader(buf.as_slice()).is_err());
    }
}

//! Binary feature blobs that accompany annotation files.
//!
//! Layout, little-endian: 8-byte magic, `u32` feature dimension, `u64`
//! record count, then per record a `u32`-length-prefixed UTF-8 image id
//! followed by the features and the mirrored features as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

const MAGIC: &[u8; 8] = b"VPFEAT\x00\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image: String,
    pub features: Vec<f64>,
    pub flipped: Vec<f64>,
}

pub fn write_features<W: Write>(mut w: W, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(dim)?.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.features.len() != dim || r.flipped.len() != dim {
            bail!("feature record `{}` does not have dimension {dim}", r.image);
        }
        w.write_all(&u32::try_from(r.image.len())?.to_le_bytes())?;
        w.write_all(r.image.as_bytes())?;
        for x in r.features.iter().chain(&r.flipped) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).context("truncated feature file")?;
    Ok(buf)
}

/// Returns the feature dimension and the records.
pub fn read_features<R: Read>(mut r: R) -> Result<(usize, Vec<FeatureRecord>)> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        bail!("not a feature file (bad magic)");
    }
    let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).context("truncated feature file")?;
        let image = String::from_utf8(name).context("image id is not UTF-8")?;
        let mut vals = Vec::with_capacity(2 * dim);
        for _ in 0..2 * dim {
            vals.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let flipped = vals.split_off(dim);
        out.push(FeatureRecord {
            image,
            features: vals,
            flipped,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!("trailing bytes after {count} feature records");
    }
    Ok((dim, out))
}

pub fn save_features(path: &Path, dim: usize, records: &[FeatureRecord]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_features(&mut w, dim, records).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<(usize, Vec<FeatureRecord>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_features(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

//! JSON-lines annotation and prediction files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use viewpoint_core::viewgeom::NUM_CLASSES;

/// Rounds to 9 significant digits; the shortest repr of the result is what
/// gets printed.
pub fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Formats a float for CSV output with at most 9 significant digits.
pub fn fmt9(x: f64) -> String {
    round9(x).to_string()
}

/// Azimuth rounded like every other float, wrapped back into `[0, 360)`.
fn round_azimuth(a: f64) -> f64 {
    let r = round9(a);
    if r >= 360.0 {
        r - 360.0
    } else {
        r
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub class: String,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub azimuth: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image: String,
    pub class: String,
    pub bbox: [f64; 4],
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewpoint_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_bin: Option<usize>,
}

fn check_bbox(b: &[f64; 4]) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) {
        bail!("bbox values must be finite");
    }
    if !(b[2] > 0.0 && b[3] > 0.0) {
        bail!("bbox width and height must be positive, got {} x {}", b[2], b[3]);
    }
    Ok(())
}

/// Shared validation and float rounding for both record kinds.
pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<()>;
    /// Copy with every float rounded to 9 significant digits.
    fn rounded(&self) -> Self;
}

impl Record for AnnotationRecord {
    fn validate(&self) -> Result<()> {
        check_bbox(&self.bbox)?;
        if !(0.0..360.0).contains(&self.azimuth) {
            bail!("azimuth {} outside [0, 360)", self.azimuth);
        }
        Ok(())
    }

    fn rounded(&self) -> Self {
        Self {
            bbox: self.bbox.map(round9),
            azimuth: round_azimuth(self.azimuth),
            ..self.clone()
        }
    }
}

impl Record for PredictionRecord {
    fn validate(&self) -> Result<()> {
        check_bbox(&self.bbox)?;
        if !self.confidence.is_finite() {
            bail!("confidence must be finite");
        }
        match (&self.viewpoint_scores, self.predicted_bin) {
            (Some(s), None) => {
                if s.len() != NUM_CLASSES {
                    bail!("viewpoint_scores needs {NUM_CLASSES} entries, got {}", s.len());
                }
                if s.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    bail!("viewpoint_scores must be finite and nonnegative");
                }
                Ok(())
            }
            (None, Some(_)) => Ok(()),
            _ => bail!("exactly one of viewpoint_scores and predicted_bin must be present"),
        }
    }

    fn rounded(&self) -> Self {
        Self {
            bbox: self.bbox.map(round9),
            confidence: round9(self.confidence),
            viewpoint_scores: self.viewpoint_scores.as_ref().map(|s| s.iter().copied().map(round9).collect()),
            ..self.clone()
        }
    }
}

/// One JSON object per line, floats rounded.
pub fn emit<R: Record>(rec: &R) -> String {
    serde_json::to_string(&rec.rounded()).expect("records serialize")
}

pub fn parse<R: Record>(line: &str) -> Result<R> {
    let rec: R = serde_json::from_str(line)?;
    rec.validate()?;
    Ok(rec)
}

pub fn write_jsonl<R: Record>(path: &Path, records: &[R]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", emit(r)).with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads every nonblank line; errors name the file and line.
pub fn read_jsonl<R: Record>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_nine_digits() {
        assert_eq!(round9(1.0 / 3.0), 0.333333333);
        assert_eq!(round9(123456789.4), 123456789.0);
        assert_eq!(round9(0.0), 0.0);
        assert_eq!(fmt9(2.0 / 3.0), "0.666666667");
        assert_eq!(round_azimuth(359.99999999999), 0.0);
    }

    #[test]
    fn prediction_needs_exactly_one_viewpoint_field() {
        let base = r#"{"image":"a","class":"car","bbox":[0,0,1,1],"confidence":0.5"#;
        assert!(parse::<PredictionRecord>(&format!("{base}}}")).is_err());
        assert!(parse::<PredictionRecord>(&format!("{base},\"predicted_bin\":3}}")).is_ok());
        let scores = serde_json::to_string(&vec![0.0; 360]).unwrap();
        assert!(parse::<PredictionRecord>(&format!("{base},\"viewpoint_scores\":{scores}}}")).is_ok());
        assert!(parse::<PredictionRecord>(&format!("{base},\"viewpoint_scores\":{scores},\"predicted_bin\":1}}")).is_err());
        assert!(parse::<PredictionRecord>(&format!("{base},\"viewpoint_scores\":[1.0]}}")).is_err());
    }

    #[test]
    fn annotation_validation() {
        let ok = r#"{"image":"a","class":"car","bbox":[0,0,1,1],"azimuth":12.5}"#;
        let rec: AnnotationRecord = parse(ok).unwrap();
        assert!(!rec.difficult);
        assert!(parse::<AnnotationRecord>(&ok.replace("12.5", "360")).is_err());
        assert!(parse::<AnnotationRecord>(&ok.replace("[0,0,1,1]", "[0,0,0,1]")).is_err());
        assert!(parse::<AnnotationRecord>(&ok.replace("}", ",\"extra\":1}")).is_err());
    }
}

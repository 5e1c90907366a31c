//! JSON dataset manifests.
//!
//! ```json
//! {
//!   "name": "cov-vac",
//!   "task": "regression",
//!   "num_classes": null,
//!   "samples": [
//!     {"id": "s0", "label": 0.31, "split": "train",
//!      "dna": "tracks/s0.dna.blf", "rna": "tracks/s0.rna.blf", "protein": "tracks/s0.protein.blf"}
//!   ],
//!   "provenance": {"dna": "nucleotide-transformer-v2", "rna": "rna-fm", "protein": "esm2-8m"}
//! }
//! ```
//!
//! Track paths are resolved relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::Modality;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}`; expected train, val or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dna: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rna: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protein: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub label: f64,
    pub split: Split,
    #[serde(default)]
    pub dna: Option<PathBuf>,
    #[serde(default)]
    pub rna: Option<PathBuf>,
    #[serde(default)]
    pub protein: Option<PathBuf>,
}

impl SampleEntry {
    pub fn track_path(&self, m: Modality) -> Option<&Path> {
        match m {
            Modality::Dna => self.dna.as_deref(),
            Modality::Rna => self.rna.as_deref(),
            Modality::Protein => self.protein.as_deref(),
        }
    }

    /// Class index of a classification label.
    pub fn class(&self) -> usize {
        self.label as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskKind,
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if self.task == TaskKind::Classification {
            match self.num_classes {
                Some(k) if k >= 2 => {}
                other => {
                    return Err(Error::Manifest(format!(
                        "classification needs num_classes >= 2, got {other:?}"
                    )))
                }
            }
        }
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id `{}`", s.id)));
            }
            for m in Modality::ALL {
                if s.track_path(m).is_none() {
                    return Err(Error::Manifest(format!("sample `{}` has no {m} track", s.id)));
                }
            }
            if !s.label.is_finite() {
                return Err(Error::Manifest(format!("sample `{}` has a non-finite label", s.id)));
            }
            if self.task == TaskKind::Classification {
                let k = self.num_classes.unwrap_or(0);
                if s.label.fract() != 0.0 || s.label < 0.0 || s.label >= k as f64 {
                    return Err(Error::Manifest(format!(
                        "sample `{}` label {} is not a class index below {k}",
                        s.id, s.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Outputs of the prediction head: 1 for regression, the class count otherwise.
    pub fn outputs(&self) -> usize {
        match self.task {
            TaskKind::Regression => 1,
            TaskKind::Classification => self.num_classes.unwrap_or(2),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "name": "toy", "task": "classification", "num_classes": 3,
        "samples": [
            {"id": "a", "label": 2, "split": "train", "dna": "a.d", "rna": "a.r", "protein": "a.p"},
            {"id": "b", "label": 0, "split": "test", "dna": "b.d", "rna": "b.r", "protein": "b.p"}
        ],
        "provenance": {"rna": "rna-fm"}
    }"#;

    #[test]
    fn parses_and_validates() {
        let m = DatasetManifest::from_json(DOC).unwrap();
        assert_eq!(m.samples.len(), 2);
        assert_eq!(m.outputs(), 3);
        assert_eq!(m.split_len(Split::Test), 1);
        assert_eq!(m.samples[0].class(), 2);
    }

    #[test]
    fn rejects_sample_without_modality() {
        let doc = DOC.replace(r#", "protein": "b.p""#, "");
        let err = DatasetManifest::from_json(&doc).unwrap_err();
        assert!(err.to_string().contains("sample `b` has no PROTEIN track"), "{err}");
    }

    #[test]
    fn rejects_bad_labels_and_unknown_fields() {
        assert!(DatasetManifest::from_json(&DOC.replace(r#""label": 2"#, r#""label": 3"#)).is_err());
        assert!(DatasetManifest::from_json(&DOC.replace(r#""label": 2"#, r#""label": 1.5"#)).is_err());
        assert!(DatasetManifest::from_json(&DOC.replace(r#""name""#, r#""extra": 1, "name""#)).is_err());
        assert!(DatasetManifest::from_json(&DOC.replace(r#""id": "b""#, r#""id": "a""#)).is_err());
    }
}

//! Clip lists: CSV with a `path,label,split` header. Label and split may be
//! empty. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be `train` or `test`, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Manifest {
                    path: base_dir.clone(),
                    message: format!("duplicate clip path `{}`", r.path),
                });
            }
        }
        Ok(Manifest { rows, base_dir })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| err(e.to_string()))?;
        let rows = reader
            .deserialize::<ManifestRow>()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| err(format!("row {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(rows, base).map_err(|e| match e {
            Error::Manifest { message, .. } => err(message),
            other => other,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Manifest {
                path: self.base_dir.clone(),
                message: e.to_string(),
            })?;
        }
        w.into_inner().map_err(|e| Error::Manifest {
            path: self.base_dir.clone(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_csv()?)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Rows of `split`; rows without a split tag count as training data.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows
            .iter()
            .filter(move |r| r.split.unwrap_or(Split::Train) == split)
    }
}

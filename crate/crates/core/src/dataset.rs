//! On-disk sample sets: paired PGM files plus a JSON-lines manifest.
//!
//! Layout written by [`write_dataset`]:
//!
//! ```text
//! <dir>/manifest.jsonl
//! <dir>/grey/<id>.pgm     8-bit grey, intensity * 255
//! <dir>/labels/<id>.pgm   8-bit, 1-based class index
//! ```
//!
//! Paths inside the manifest are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{resize_grey, resize_labels, LabelError, LabelSchema};
use crate::netpbm::{self, NetpbmError};
use crate::phantom::{Diagnosis, Sample};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{0}")]
    Validation(String),
}

fn is_dense(s: &LabelSchema) -> bool {
    *s == LabelSchema::Dense
}

fn dense() -> LabelSchema {
    LabelSchema::Dense
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub grey_path: String,
    pub label_path: String,
    pub diagnosis: Diagnosis,
    pub group_id: String,
    pub frame_index: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<String>,
    /// Schema of the label file; omitted when dense.
    #[serde(default = "dense", skip_serializing_if = "is_dense")]
    pub schema: LabelSchema,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io { path: shown.clone(), source })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: shown.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|source| DatasetError::Json { path: shown.clone(), line: i + 1, source })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DatasetError::Validation(format!("{shown}: manifest has no records")));
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest record serializes");
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Write every sample's grey and label maps plus the manifest under `dir`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf, DatasetError> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let grey_path = format!("grey/{}.pgm", s.id);
        let label_path = format!("labels/{}.pgm", s.id);
        netpbm::save_grey(&dir.join(&grey_path), &s.grey)?;
        netpbm::save_labels(&dir.join(&label_path), &s.labels)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            grey_path,
            label_path,
            diagnosis: s.diagnosis,
            group_id: s.group_id.clone(),
            frame_index: s.frame_index,
            seed: s.seed,
            augment: s.augment.clone(),
            schema: s.labels.schema(),
        });
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Load every sample listed in a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>, DatasetError> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let grey = netpbm::load_grey(&root.join(&r.grey_path))?;
            let labels = netpbm::load_labels(&root.join(&r.label_path), r.schema)?;
            if grey.dims() != labels.dims() {
                return Err(DatasetError::Validation(format!(
                    "{}: grey is {:?} but labels are {:?}",
                    r.id,
                    grey.dims(),
                    labels.dims()
                )));
            }
            Ok(Sample {
                id: r.id,
                grey,
                labels,
                diagnosis: r.diagnosis,
                group_id: r.group_id,
                frame_index: r.frame_index,
                seed: r.seed,
                augment: r.augment,
            })
        })
        .collect()
}

/// Resize grey (bilinear) and labels (nearest) of every sample to `size`.
/// Samples already at `size` are left untouched.
pub fn resize_samples(samples: &[Sample], size: (usize, usize)) -> Result<Vec<Sample>, DatasetError> {
    samples
        .iter()
        .map(|s| {
            if s.grey.dims() == size {
                return Ok(s.clone());
            }
            Ok(Sample { grey: resize_grey(&s.grey, size)?, labels: resize_labels(&s.labels, size)?, ..s.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{gen_dataset, DatasetSpec};

    #[test]
    fn write_then_load_preserves_labels_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_dataset(&DatasetSpec::demo(3)).unwrap();
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.labels, b.labels);
            assert_eq!((&a.id, &a.group_id, a.diagnosis, a.seed), (&b.id, &b.group_id, b.diagnosis, b.seed));
            for (x, y) in a.grey.data().iter().zip(b.grey.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn manifest_lines_carry_the_documented_fields() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_dataset(&DatasetSpec::demo(3)).unwrap();
        let manifest = write_dataset(dir.path(), &samples[..1]).unwrap();
        let line = fs::read_to_string(manifest).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        for key in ["id", "grey_path", "label_path", "diagnosis", "group_id", "frame_index", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["diagnosis"], "Normal");
        assert!(v.get("augment").is_none());
    }

    #[test]
    fn bad_json_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "\n{oops}\n").unwrap();
        let err = read_manifest(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}

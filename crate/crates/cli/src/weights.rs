//! Weight files.
//!
//! Two layouts share one loader:
//!
//! * inline: `{"tensors": [{"name", "shape", "data"}]}` with `data` as nested
//!   JSON arrays following `shape`;
//! * manifest: `{"blob": "<file>", "tensors": [{"name", "shape", "dtype",
//!   "byte_offset"}]}` next to a raw little-endian blob of `f32` or `f64`
//!   values. `blob` is resolved relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dydila_core::Real;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Precision;
use crate::params::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InlineTensor {
    name: String,
    shape: Vec<usize>,
    data: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Precision,
    pub byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    blob: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Inline {
    tensors: Vec<InlineTensor>,
}

fn nest(data: &[f64], shape: &[usize]) -> Value {
    match shape {
        [] => Value::from(data[0]),
        [_] => Value::from(data.to_vec()),
        [n, rest @ ..] => {
            let stride = data.len() / n.max(&1);
            Value::Array(
                (0..*n)
                    .map(|i| nest(&data[i * stride..(i + 1) * stride], rest))
                    .collect(),
            )
        }
    }
}

fn flatten(value: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match shape {
        [] => out.push(value.as_f64().context("expected a number")?),
        [n, rest @ ..] => {
            let items = value.as_array().context("expected an array")?;
            ensure!(
                items.len() == *n,
                "array of length {} where {n} was expected",
                items.len()
            );
            for item in items {
                flatten(item, rest, out)?;
            }
        }
    }
    Ok(())
}

pub fn save_inline(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let doc = Inline {
        tensors: tensors
            .iter()
            .map(|t| InlineTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: nest(&t.data, &t.shape),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn encode<T: Real>(tensors: &[Tensor], dtype: Precision) -> (Vec<u8>, Vec<ManifestEntry>) {
    let mut blob = Vec::new();
    let entries = tensors
        .iter()
        .map(|t| {
            let entry = ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype,
                byte_offset: blob.len() as u64,
            };
            t.data.iter().for_each(|&v| T::lit(v).write_le(&mut blob));
            entry
        })
        .collect();
    (blob, entries)
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (blob); returns the
/// manifest path.
pub fn save_blob(stem: &Path, tensors: &[Tensor], dtype: Precision) -> Result<PathBuf> {
    let manifest_path = stem.with_extension("json");
    let blob_path = stem.with_extension("bin");
    let (blob, entries) = match dtype {
        Precision::F32 => encode::<f32>(tensors, dtype),
        Precision::F64 => encode::<f64>(tensors, dtype),
    };
    fs::write(&blob_path, blob).with_context(|| format!("writing {}", blob_path.display()))?;
    let manifest = Manifest {
        blob: blob_path
            .file_name()
            .context("blob path has no file name")?
            .to_string_lossy()
            .into_owned(),
        tensors: entries,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    Ok(manifest_path)
}

fn decode<T: Real>(blob: &[u8], offset: usize, count: usize) -> Vec<f64> {
    blob[offset..offset + count * T::BYTES]
        .chunks_exact(T::BYTES)
        .map(|c| T::read_le(c).as_f64())
        .collect()
}

/// Loads either layout.
pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("blob").is_some() {
        let manifest: Manifest = serde_json::from_value(value)?;
        let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(&blob_path).with_context(|| format!("reading {}", blob_path.display()))?;
        manifest
            .tensors
            .into_iter()
            .map(|e| {
                let count: usize = e.shape.iter().product();
                let width = match e.dtype {
                    Precision::F32 => 4,
                    Precision::F64 => 8,
                };
                let offset = usize::try_from(e.byte_offset)?;
                let end = offset.checked_add(count * width).context("tensor extent overflows")?;
                if end > blob.len() {
                    bail!(
                        "tensor `{}` runs past the end of {} ({end} > {} bytes)",
                        e.name,
                        blob_path.display(),
                        blob.len()
                    );
                }
                let data = match e.dtype {
                    Precision::F32 => decode::<f32>(&blob, offset, count),
                    Precision::F64 => decode::<f64>(&blob, offset, count),
                };
                Ok(Tensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect()
    } else {
        let inline: Inline = serde_json::from_value(value)?;
        inline
            .tensors
            .into_iter()
            .map(|t| {
                let mut data = Vec::new();
                flatten(&t.data, &t.shape, &mut data).with_context(|| format!("tensor `{}`", t.name))?;
                Ok(Tensor {
                    name: t.name,
                    shape: t.shape,
                    data,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor {
                name: "a".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25, 0.0, 1e-7, 6.0],
            },
            Tensor {
                name: "b".into(),
                shape: vec![2],
                data: vec![0.1, 0.2],
            },
            Tensor {
                name: "c".into(),
                shape: vec![2, 1, 2],
                data: vec![1.0, 2.0, 3.0, 4.0],
            },
        ]
    }

    #[test]
    fn nesting_follows_shape() {
        assert_eq!(
            nest(&[1.0, 2.0, 3.0, 4.0], &[2, 2]),
            serde_json::json!([[1.0, 2.0], [3.0, 4.0]])
        );
        let mut out = Vec::new();
        assert!(flatten(&serde_json::json!([[1.0], [2.0, 3.0]]), &[2, 1], &mut out).is_err());
    }

    #[test]
    fn both_layouts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inline = dir.path().join("w.json");
        save_inline(&inline, &sample()).unwrap();
        assert_eq!(load(&inline).unwrap(), sample());

        let manifest = save_blob(&dir.path().join("big"), &sample(), Precision::F64).unwrap();
        assert_eq!(load(&manifest).unwrap(), sample());
        let bytes = fs::metadata(dir.path().join("big.bin")).unwrap().len();
        assert_eq!(bytes, 12 * 8);

        let manifest = save_blob(&dir.path().join("small"), &sample(), Precision::F32).unwrap();
        let loaded = load(&manifest).unwrap();
        assert_eq!(loaded[1].data, vec![0.1f32 as f64, 0.2f32 as f64]);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_blob(&dir.path().join("w"), &sample(), Precision::F64).unwrap();
        fs::write(dir.path().join("w.bin"), [0u8; 16]).unwrap();
        assert!(load(&manifest).is_err());
    }
}

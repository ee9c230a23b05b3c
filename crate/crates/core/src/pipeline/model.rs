use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::autodiff::ParamSet;
use crate::heads::HeadSpec;
use crate::tensor::Tensor;

pub const MODEL_JSON: &str = "model.json";
pub const MODEL_BLOB: &str = "model.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub id: String,
    pub shape: Vec<usize>,
    /// Offset into the blob in f32 elements.
    pub offset: usize,
}

/// Model JSON document: head description plus the blob layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: HeadSpec,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
}

/// Little-endian f32 values of every parameter, in id order.
pub fn param_blob(params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.scalar_count() * 4);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(
    dir: &Path,
    spec: &HeadSpec,
    params: &ParamSet<f32>,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut offset = 0;
    let entries = params
        .iter()
        .map(|(id, t)| {
            let e = ParamEntry {
                id: id.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let doc = ModelFile {
        spec: spec.clone(),
        dtype: "f32".into(),
        params: entries,
    };
    let json_path = dir.join(MODEL_JSON);
    let blob_path = dir.join(MODEL_BLOB);
    let text = serde_json::to_string_pretty(&doc).expect("model serializes");
    fs::write(&json_path, text).map_err(|e| PipelineError::io(&json_path, e))?;
    fs::write(&blob_path, param_blob(params)).map_err(|e| PipelineError::io(&blob_path, e))?;
    Ok((json_path, blob_path))
}

pub fn load_model(dir: &Path) -> Result<(HeadSpec, ParamSet<f32>)> {
    let json_path = dir.join(MODEL_JSON);
    let blob_path = dir.join(MODEL_BLOB);
    let text = fs::read_to_string(&json_path).map_err(|e| PipelineError::io(&json_path, e))?;
    let doc: ModelFile =
        serde_json::from_str(&text).map_err(|e| PipelineError::json(&json_path, e))?;
    let blob = fs::read(&blob_path).map_err(|e| PipelineError::io(&blob_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(PipelineError::Config(format!(
            "{}: blob length {} is not a multiple of 4",
            blob_path.display(),
            blob.len()
        )));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let expected = doc.spec.param_shapes();
    let listed: Vec<(String, Vec<usize>)> = doc
        .params
        .iter()
        .map(|e| (e.id.clone(), e.shape.clone()))
        .collect();
    if expected != listed {
        return Err(PipelineError::Config(format!(
            "{}: parameter layout does not match the head description",
            json_path.display()
        )));
    }
    let mut params = ParamSet::new();
    for e in &doc.params {
        let n: usize = e.shape.iter().product();
        let data = floats.get(e.offset..e.offset + n).ok_or_else(|| {
            PipelineError::Config(format!(
                "{}: blob too short for `{}`",
                blob_path.display(),
                e.id
            ))
        })?;
        params.insert(e.id.clone(), Tensor::new(e.shape.clone(), data.to_vec())?)?;
    }
    if params.scalar_count() != floats.len() {
        return Err(PipelineError::Config(format!(
            "{}: {} trailing values",
            blob_path.display(),
            floats.len() - params.scalar_count()
        )));
    }
    Ok((doc.spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadKind, Task};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = HeadSpec {
            adapter_size: 3,
            shared: false,
            ..HeadSpec::new(Task::Span, HeadKind::Adapter, 4, 5, 3)
        };
        let p = spec.init_params(11).unwrap();
        save_model(dir.path(), &spec, &p).unwrap();
        let (s2, p2) = load_model(dir.path()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(param_blob(&p2), param_blob(&p));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = HeadSpec::new(Task::Span, HeadKind::Lp, 4, 5, 3);
        save_model(dir.path(), &spec, &spec.init_params(0).unwrap()).unwrap();
        let blob = dir.path().join(MODEL_BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_model(dir.path()).is_err());
    }
}

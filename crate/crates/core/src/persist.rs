//! Model files.
//!
//! Most models are plain JSON documents. Network parameters are written as
//! a tensor bundle: a JSON manifest naming each tensor's shape and offset,
//! plus a payload of little-endian `f32` values next to it, following the
//! grid-stack file convention.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cnn::{ChannelNorm, CnnAsdModel, CnnParams, CnnSpec};
use crate::error::{Error, Result};
use crate::grid::{decode_f32, encode_f32, payload_name};
use crate::linear::HyperParams;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// offset into the payload, in values
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest<M> {
    pub meta: M,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
}

/// A named tensor read from a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Writes `meta` and the tensors; values are stored as `f32`.
pub fn save_bundle<M: Serialize>(path: &Path, meta: &M, tensors: &[Tensor]) -> Result<()> {
    ensure_parent(path)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(Error::Dimension(format!(
                "tensor {} shape {:?} vs {} values",
                t.name,
                t.shape,
                t.values.len()
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.values.len();
    }
    let payload = payload_name(path);
    let manifest = BundleManifest {
        meta,
        payload: payload.clone(),
        tensors: entries,
    };
    save_json(&manifest, path)?;
    let bytes = encode_f32(tensors.iter().flat_map(|t| t.values.iter().map(|v| *v as f32)));
    let payload_path: PathBuf = path.with_file_name(payload);
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))
}

pub fn load_bundle<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<Tensor>)> {
    let manifest: BundleManifest<M> = load_json(path)?;
    let payload_path = path.with_file_name(&manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Dimension(format!(
            "payload of {} bytes is not whole f32 values",
            bytes.len()
        )));
    }
    let values = decode_f32(&bytes);
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let len: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Dimension(format!("tensor {} overruns the payload", e.name)))?;
        tensors.push(Tensor {
            name: e.name,
            shape: e.shape,
            values: slice.iter().map(|v| f64::from(*v)).collect(),
        });
    }
    Ok((manifest.meta, tensors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CnnMeta {
    norm: ChannelNorm,
    classifier_spec: CnnSpec,
    regressor_spec: CnnSpec,
    hyper: HyperParams,
    classifier_curve: Vec<f64>,
    regressor_curve: Vec<f64>,
}

fn param_tensors(prefix: &str, spec: &CnnSpec, p: &CnnParams) -> Vec<Tensor> {
    let k = spec.kernel;
    let shapes = [
        vec![spec.filters1, spec.channels, k, k],
        vec![spec.filters1],
        vec![spec.filters2, spec.filters1, k, k],
        vec![spec.filters2],
        vec![spec.outputs, spec.flat_len()],
        vec![spec.outputs],
    ];
    CnnParams::NAMES
        .iter()
        .zip(shapes)
        .zip(p.tensors())
        .map(|((name, shape), values)| Tensor {
            name: format!("{prefix}.{name}"),
            shape,
            values: values.clone(),
        })
        .collect()
}

fn params_from(prefix: &str, spec: &CnnSpec, tensors: &[Tensor]) -> Result<CnnParams> {
    let mut p = CnnParams::zeros(spec);
    for (name, slot) in CnnParams::NAMES.iter().zip(p.tensors_mut()) {
        let full = format!("{prefix}.{name}");
        let t = tensors
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::MissingModel(format!("tensor {full}")))?;
        if t.values.len() != slot.len() {
            return Err(Error::Dimension(format!(
                "{full} has {} values, expected {}",
                t.values.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&t.values);
    }
    Ok(p)
}

/// Writes both networks of a CNN model as one bundle.
pub fn save_cnn_model(model: &CnnAsdModel, path: &Path) -> Result<()> {
    let meta = CnnMeta {
        norm: model.norm.clone(),
        classifier_spec: model.classifier_spec.clone(),
        regressor_spec: model.regressor_spec.clone(),
        hyper: model.hyper,
        classifier_curve: model.classifier_curve.clone(),
        regressor_curve: model.regressor_curve.clone(),
    };
    let mut tensors = param_tensors("classifier", &model.classifier_spec, &model.classifier);
    tensors.extend(param_tensors("regressor", &model.regressor_spec, &model.regressor));
    save_bundle(path, &meta, &tensors)
}

pub fn load_cnn_model(path: &Path) -> Result<CnnAsdModel> {
    let (meta, tensors): (CnnMeta, _) = load_bundle(path)?;
    Ok(CnnAsdModel {
        classifier: params_from("classifier", &meta.classifier_spec, &tensors)?,
        regressor: params_from("regressor", &meta.regressor_spec, &tensors)?,
        norm: meta.norm,
        classifier_spec: meta.classifier_spec,
        regressor_spec: meta.regressor_spec,
        hyper: meta.hyper,
        classifier_curve: meta.classifier_curve,
        regressor_curve: meta.regressor_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Head;

    #[test]
    fn bundle_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let t = vec![
            Tensor {
                name: "a".into(),
                shape: vec![2, 2],
                values: vec![1.0, 2.5, -3.0, 0.1],
            },
            Tensor {
                name: "b".into(),
                shape: vec![1],
                values: vec![7.0],
            },
        ];
        save_bundle(&path, &"meta", &t).unwrap();
        assert!(dir.path().join("m.f32").exists());
        let (meta, back): (String, _) = load_bundle(&path).unwrap();
        assert_eq!(meta, "meta");
        assert_eq!(back[1], t[1]);
        assert_eq!(back[0].values[3], f64::from(0.1f32));
        let bad = [Tensor {
            name: "c".into(),
            shape: vec![3],
            values: vec![1.0],
        }];
        assert!(save_bundle(&path, &0, &bad).is_err());
    }

    #[test]
    fn cnn_model_round_trip() {
        let spec = CnnSpec::new(5, 5, 2, 3, Head::Sigmoid);
        let reg = CnnSpec {
            head: Head::Linear,
            ..spec.clone()
        };
        let model = CnnAsdModel {
            norm: ChannelNorm {
                means: vec![0.5, 1.0],
                scales: vec![2.0, 3.0],
            },
            classifier: CnnParams::init(&spec, 1),
            regressor: CnnParams::init(&reg, 2),
            classifier_spec: spec,
            regressor_spec: reg,
            hyper: HyperParams::default(),
            classifier_curve: vec![0.7, 0.6],
            regressor_curve: vec![3.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cnn.json");
        save_cnn_model(&model, &path).unwrap();
        let back = load_cnn_model(&path).unwrap();
        assert_eq!(back.norm, model.norm);
        for (a, b) in back.classifier.tensors().iter().zip(model.classifier.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
    }
}

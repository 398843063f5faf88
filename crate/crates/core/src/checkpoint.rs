//! Parameter checkpoints: safetensors files whose metadata carries a JSON
//! manifest under the key `manifest`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::VarStore;

const MANIFEST_KEY: &str = "manifest";

fn ck_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Writes the variables of every `(prefix, store)` pair as `prefix/name`.
/// The write goes to a temporary file renamed into place.
pub fn save<M: Serialize>(path: &Path, stores: &[(&str, &VarStore)], manifest: &M) -> Result<()> {
    let mut owned = Vec::new();
    for (prefix, store) in stores {
        for (name, var) in store.named() {
            let (dtype, bytes) = tensor_bytes(var.as_tensor())?;
            owned.push((format!("{prefix}/{name}"), dtype, var.dims().to_vec(), bytes));
        }
    }
    let views = owned
        .iter()
        .map(|(n, d, s, b)| Ok((n.clone(), TensorView::new(*d, s.clone(), b).map_err(ck_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(ck_err)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads the manifest without touching the tensors.
pub fn read_manifest<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let bytes = read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(ck_err)?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no manifest", path.display())))?;
    Ok(serde_json::from_str(json)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Overwrites every variable of each store from `prefix/name` in the file.
/// Missing tensors or shape mismatches are errors.
pub fn load_into(path: &Path, stores: &[(&str, &VarStore)]) -> Result<()> {
    let bytes = read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(ck_err)?;
    for (prefix, store) in stores {
        for (name, var) in store.named() {
            let key = format!("{prefix}/{name}");
            let view = st
                .tensor(&key)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {key}")))?;
            if view.shape() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    view.shape(),
                    var.dims()
                )));
            }
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, view.shape(), var.device())?
                }
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, view.shape(), var.device())?
                }
                other => return Err(Error::Checkpoint(format!("{key}: unsupported dtype {other:?}"))),
            };
            var.set(&t.to_dtype(var.dtype())?)?;
        }
    }
    Ok(())
}

//! Tensor containers (safetensors) and weight checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{FrinetError, Result};
use crate::nn::{Parameterized, Real};

/// Sidecar path for a container: `weights.safetensors` → `weights.safetensors.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Named parameter values converted to `f32`, in sorted name order.
pub fn export_params<T: Real, M: Parameterized<T> + ?Sized>(model: &M) -> BTreeMap<String, ArrayD<f32>> {
    model
        .params()
        .into_iter()
        .map(|(name, p)| (name, p.value.mapv(|v| v.to_f32().unwrap_or(f32::NAN))))
        .collect()
}

/// Copies stored values into the model; every model param must be present with the same shape.
pub fn import_params<T: Real, M: Parameterized<T> + ?Sized>(
    model: &mut M,
    tensors: &BTreeMap<String, ArrayD<f32>>,
    path: &Path,
) -> Result<()> {
    for (name, p) in model.params_mut() {
        let stored = tensors
            .get(&name)
            .ok_or_else(|| FrinetError::format(path, format!("missing tensor `{name}`")))?;
        if stored.shape() != p.value.shape() {
            return Err(FrinetError::format(
                path,
                format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = stored.mapv(|v| T::of(v as f64));
    }
    Ok(())
}

/// SHA-256 over names, shapes and little-endian `f32` payloads in sorted order.
pub fn checksum_tensors(tensors: &BTreeMap<String, ArrayD<f32>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn params_checksum<T: Real, M: Parameterized<T> + ?Sized>(model: &M) -> String {
    checksum_tensors(&export_params(model))
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| FrinetError::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let encoded = safetensors::serialize(views, &None).map_err(|e| FrinetError::format(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FrinetError::io(dir, e))?;
    }
    fs::write(path, encoded).map_err(|e| FrinetError::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let bytes = fs::read(path).map_err(|e| FrinetError::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| FrinetError::format(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(FrinetError::format(path, format!("tensor `{name}` is not f32")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| FrinetError::format(path, e.to_string()))?;
        out.insert(name, arr);
    }
    Ok(out)
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| FrinetError::io(path, e))
}

pub fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| FrinetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FrinetError::format(path, e.to_string()))
}

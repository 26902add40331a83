use std::path::Path;

use log::info;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneSpec, ToyBackbone, ToyBackboneConfig, TOY_BACKBONE_NAME};
use crate::error::{FrinetError, Result};
use crate::store::{
    checksum_tensors, export_params, import_params, read_json, read_tensors, sidecar_path, write_json, write_tensors,
};

/// Side length of the probe image whose feature hash is stored with the weights.
pub const PROBE_SIZE: usize = 64;

/// Sidecar JSON written next to a weights container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMetadata {
    pub name: String,
    pub channels: usize,
    pub stride: usize,
    pub weight_checksum: String,
    pub pretrain_fold: Option<usize>,
    pub pixel_accuracy: Option<f64>,
    pub widths: [usize; 4],
    pub padded: bool,
    pub probe_feature_hash: String,
}

/// Deterministic smooth RGB pattern used to fingerprint an extractor.
pub fn probe_image(size: usize) -> Array3<f32> {
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let t = (y as f32 * 0.37 + x as f32 * 0.11 + c as f32 * 1.3).sin();
        let u = ((x * y + 3 * c) % 17) as f32 / 17.0;
        0.5 + 0.3 * t + 0.2 * (u - 0.5)
    })
}

pub fn probe_feature_hash(backbone: &ToyBackbone<f32>) -> Result<String> {
    let f = backbone.extract_features(&probe_image(PROBE_SIZE))?;
    let mut h = Sha256::new();
    for d in f.data.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in f.data.iter() {
        h.update(v.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes weights plus sidecar and returns the frozen spec pointing at them.
pub fn save_backbone(
    backbone: &ToyBackbone<f32>,
    path: &Path,
    pretrain_fold: Option<usize>,
    pixel_accuracy: Option<f64>,
) -> Result<BackboneSpec> {
    let tensors = export_params(backbone);
    let meta = BackboneMetadata {
        name: TOY_BACKBONE_NAME.to_string(),
        channels: backbone.channels(),
        stride: backbone.stride(),
        weight_checksum: checksum_tensors(&tensors),
        pretrain_fold,
        pixel_accuracy,
        widths: backbone.config.widths,
        padded: backbone.config.padded,
        probe_feature_hash: probe_feature_hash(backbone)?,
    };
    write_tensors(path, &tensors)?;
    write_json(&sidecar_path(path), &meta)?;
    Ok(BackboneSpec {
        name: meta.name,
        channels: meta.channels,
        stride: meta.stride,
        frozen: true,
        weights_uri: path.to_path_buf(),
    })
}

pub fn read_metadata(path: &Path) -> Result<BackboneMetadata> {
    read_json(&sidecar_path(path))
}

/// Loads and verifies a stored extractor against its declared spec.
pub fn load_backbone(spec: &BackboneSpec) -> Result<ToyBackbone<f32>> {
    let path = &spec.weights_uri;
    let meta = read_metadata(path)?;
    if meta.name != spec.name {
        return Err(FrinetError::BackboneMismatch {
            expected: format!("architecture {}", spec.name),
            found: format!("architecture {}", meta.name),
        });
    }
    if meta.channels != spec.channels || meta.stride != spec.stride {
        return Err(FrinetError::BackboneMismatch {
            expected: format!("channels {} stride {}", spec.channels, spec.stride),
            found: format!("channels {} stride {}", meta.channels, meta.stride),
        });
    }
    let tensors = read_tensors(path)?;
    let found = checksum_tensors(&tensors);
    if found != meta.weight_checksum {
        return Err(FrinetError::BackboneMismatch {
            expected: format!("weight checksum {}", meta.weight_checksum),
            found: format!("weight checksum {found}"),
        });
    }
    let mut backbone = ToyBackbone::uninitialized(ToyBackboneConfig {
        widths: meta.widths,
        padded: meta.padded,
    });
    import_params(&mut backbone, &tensors, path)?;
    backbone.mark_loaded();
    let probe = probe_feature_hash(&backbone)?;
    if probe != meta.probe_feature_hash {
        return Err(FrinetError::BackboneMismatch {
            expected: format!("probe feature hash {}", meta.probe_feature_hash),
            found: format!("probe feature hash {probe}"),
        });
    }
    info!("loaded backbone {} (weights {})", path.display(), &found[..16]);
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_keeps_checksum_and_features() {
        let bb = ToyBackbone::<f32>::random(ToyBackboneConfig::default(), 8);
        let dir = tempfile::tempdir().unwrap();
        let spec = save_backbone(&bb, &dir.path().join("bb.safetensors"), Some(1), Some(0.5)).unwrap();
        let back = load_backbone(&spec).unwrap();
        assert_eq!(back.weight_checksum(), bb.weight_checksum());
        let img = probe_image(48);
        assert_eq!(back.extract_features(&img).unwrap(), bb.extract_features(&img).unwrap());
        assert_eq!(read_metadata(&spec.weights_uri).unwrap().pretrain_fold, Some(1));
    }

    #[test]
    fn wrong_channel_count_names_both_sides() {
        let bb = ToyBackbone::<f32>::random(ToyBackboneConfig::default(), 8);
        let dir = tempfile::tempdir().unwrap();
        let mut spec = save_backbone(&bb, &dir.path().join("bb.safetensors"), None, None).unwrap();
        spec.channels = 32;
        let err = load_backbone(&spec).unwrap_err().to_string();
        assert!(err.contains("channels 32") && err.contains("channels 64"), "{err}");
    }

    #[test]
    fn tampered_weights_are_rejected() {
        let bb = ToyBackbone::<f32>::random(ToyBackboneConfig::default(), 8);
        let dir = tempfile::tempdir().unwrap();
        let spec = save_backbone(&bb, &dir.path().join("bb.safetensors"), None, None).unwrap();
        let other = ToyBackbone::<f32>::random(ToyBackboneConfig::default(), 9);
        write_tensors(&spec.weights_uri, &export_params(&other)).unwrap();
        assert!(matches!(
            load_backbone(&spec),
            Err(FrinetError::BackboneMismatch { .. })
        ));
    }
}

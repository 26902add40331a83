use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::error::{FrinetError, Result};
use crate::store::{
    checksum_tensors, export_params, import_params, read_json, read_tensors, sidecar_path, write_json, write_tensors,
};

use super::config::TrainConfig;
use super::model::FrinetModel;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| FrinetError::Config(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub epoch: usize,
    pub loss: f64,
    pub miou: Option<f64>,
}

/// Learnable parameters plus everything needed to rebuild and audit the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, ArrayD<f32>>,
    /// Where the frozen extractor lives; `None` for in-memory backbones.
    pub backbone: Option<BackboneSpec>,
    pub backbone_checksum: String,
    /// Dataset root the model was trained on, if it came from disk.
    pub dataset: Option<PathBuf>,
    pub channels: usize,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng_state: RngState,
    pub metric_log: Vec<MetricEntry>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    backbone: Option<BackboneSpec>,
    backbone_checksum: String,
    dataset: Option<PathBuf>,
    channels: usize,
    config: TrainConfig,
    epoch: usize,
    rng_state: RngState,
    metric_log: Vec<MetricEntry>,
    params_checksum: String,
}

impl Checkpoint {
    pub fn capture(
        model: &FrinetModel<f32>,
        config: &TrainConfig,
        backbone: Option<BackboneSpec>,
        backbone_checksum: String,
        epoch: usize,
        rng_state: RngState,
        metric_log: Vec<MetricEntry>,
    ) -> Self {
        Checkpoint {
            params: export_params(model),
            backbone,
            backbone_checksum,
            dataset: None,
            channels: model.channels(),
            config: config.clone(),
            epoch,
            rng_state,
            metric_log,
        }
    }

    pub fn params_checksum(&self) -> String {
        checksum_tensors(&self.params)
    }

    pub fn to_model(&self) -> Result<FrinetModel<f32>> {
        let mut model = FrinetModel::new(
            self.channels,
            self.config.head_width,
            &self.config.orientations,
            self.config.seed,
        );
        import_params(&mut model, &self.params, Path::new("<checkpoint>"))?;
        Ok(model)
    }

    /// Writes the parameter container at `path` and metadata at its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.params)?;
        write_json(
            &sidecar_path(path),
            &Sidecar {
                backbone: self.backbone.clone(),
                backbone_checksum: self.backbone_checksum.clone(),
                dataset: self.dataset.clone(),
                channels: self.channels,
                config: self.config.clone(),
                epoch: self.epoch,
                rng_state: self.rng_state.clone(),
                metric_log: self.metric_log.clone(),
                params_checksum: self.params_checksum(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = read_tensors(path)?;
        let meta: Sidecar = read_json(&sidecar_path(path))?;
        let ckpt = Checkpoint {
            params,
            backbone: meta.backbone,
            backbone_checksum: meta.backbone_checksum,
            dataset: meta.dataset,
            channels: meta.channels,
            config: meta.config,
            epoch: meta.epoch,
            rng_state: meta.rng_state,
            metric_log: meta.metric_log,
        };
        if ckpt.params_checksum() != meta.params_checksum {
            return Err(FrinetError::format(path, "parameter checksum does not match sidecar"));
        }
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(2);
        let _: [u64; 5] = rng.random();
        let state = RngState::capture(9, &rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let cfg = TrainConfig::default();
        let model = FrinetModel::<f32>::new(8, 4, &cfg.orientations, 1);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let ck = Checkpoint::capture(
            &model,
            &cfg,
            None,
            "bb".into(),
            2,
            RngState::capture(0, &rng),
            vec![MetricEntry {
                epoch: 1,
                loss: 0.5,
                miou: None,
            }],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut tampered = back.params.clone();
        tampered.values_mut().next().unwrap().iter_mut().for_each(|v| *v += 1.0);
        write_tensors(&path, &tampered).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Rotation;
use crate::error::{FrinetError, Result};

/// Meta-training hyperparameters. Serialized as flat `key = value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_1shot: usize,
    pub epochs_5shot: usize,
    /// Overrides the shot-dependent epoch count when set.
    pub epochs: Option<usize>,
    /// Optimizer steps per epoch; defaults to `dataset_size / batch_size`.
    pub steps_per_epoch: Option<usize>,
    pub mu: f64,
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub orientations: Vec<Rotation>,
    pub input_size: usize,
    pub shots: usize,
    pub fold: usize,
    pub head_width: usize,
    pub flip_augment: bool,
    /// Rotate each training image by a random multiple of 90°.
    pub rotation_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            batch_size: 4,
            epochs_1shot: 100,
            epochs_5shot: 50,
            epochs: None,
            steps_per_epoch: None,
            mu: crate::rothead::DEFAULT_MU,
            optimizer: "sgd".into(),
            momentum: 0.9,
            weight_decay: 0.0,
            poly_power: 0.9,
            seed: 0,
            orientations: Rotation::ALL.to_vec(),
            input_size: 256,
            shots: 1,
            fold: 0,
            head_width: 32,
            flip_augment: true,
            rotation_augment: false,
        }
    }
}

fn parse_orientations(text: &str) -> Result<Vec<Rotation>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let deg: i64 = t
                .parse()
                .map_err(|_| FrinetError::Config(format!("orientation `{t}` is not an integer")))?;
            Rotation::from_degrees(deg)
        })
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FrinetError::Config(format!("cannot parse `{key} = {value}`")))
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.shots >= 5 {
            self.epochs_5shot
        } else {
            self.epochs_1shot
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.orientations.contains(&Rotation::R0) {
            return Err(FrinetError::Config("orientations must include 0".into()));
        }
        let mut sorted = self.orientations.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.orientations.len() {
            return Err(FrinetError::Config("orientations contain duplicates".into()));
        }
        if self.optimizer != "sgd" {
            return Err(FrinetError::Config(format!(
                "unsupported optimizer `{}`",
                self.optimizer
            )));
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(FrinetError::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.batch_size == 0 || self.shots == 0 || self.head_width == 0 {
            return Err(FrinetError::Config(
                "batch_size, shots and head_width must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(FrinetError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs_1shot" => self.epochs_1shot = parse(key, value)?,
            "epochs_5shot" => self.epochs_5shot = parse(key, value)?,
            "epochs" => {
                self.epochs = if value.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "steps_per_epoch" => {
                self.steps_per_epoch = if value.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "mu" => self.mu = parse(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "orientations" => self.orientations = parse_orientations(value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "head_width" => self.head_width = parse(key, value)?,
            "flip_augment" => self.flip_augment = parse(key, value)?,
            "rotation_augment" => self.rotation_augment = parse(key, value)?,
            other => return Err(FrinetError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FrinetError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let orientations: Vec<String> = self.orientations.iter().map(|r| r.degrees().to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs_1shot = {}", self.epochs_1shot);
        let _ = writeln!(s, "epochs_5shot = {}", self.epochs_5shot);
        let _ = writeln!(s, "epochs = {}", opt(self.epochs));
        let _ = writeln!(s, "steps_per_epoch = {}", opt(self.steps_per_epoch));
        let _ = writeln!(s, "mu = {}", self.mu);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "poly_power = {}", self.poly_power);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "orientations = {}", orientations.join(","));
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "shots = {}", self.shots);
        let _ = writeln!(s, "fold = {}", self.fold);
        let _ = writeln!(s, "head_width = {}", self.head_width);
        let _ = writeln!(s, "flip_augment = {}", self.flip_augment);
        let _ = writeln!(s, "rotation_augment = {}", self.rotation_augment);
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FrinetError::io(path, e))?;
        Self::parse_kv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| FrinetError::io(path, e))
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}

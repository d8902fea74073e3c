//! Run configuration: structured text (TOML) with preset inheritance.
//!
//! A config file may name a `preset` (`desk` or `paper-shape`); its own keys
//! are then deep-merged over the preset's values. `paper-shape` documents the
//! full-scale hyperparameters; it is not trainable on a desk machine.

use crate::diffusion::{DdpmTrainConfig, ScheduleParams, UnetConfig};
use crate::error::{Error, Result};
use crate::scoring::ScoringConfig;
use crate::vqvae::{VqConfig, VqTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const OUT_ROOT_ENV: &str = "VOXOOD_OUT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub dims: [usize; 3],
    pub id_family: String,
    pub id_count: usize,
    pub split: [f64; 3],
    pub far_families: Vec<String>,
    pub far_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_root: PathBuf,
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
    pub deterministic: bool,
    pub data: DataConfig,
    pub vqvae: VqConfig,
    pub vqvae_train: VqTrainConfig,
    pub unet: UnetConfig,
    pub schedule: ScheduleParams,
    pub ddpm_train: DdpmTrainConfig,
    pub scoring: ScoringConfig,
}

impl RunConfig {
    /// Built-in presets.
    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "desk" => Ok(desk_preset()),
            "paper-shape" => Ok(paper_shape_preset()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (available: desk, paper-shape)"
            ))),
        }
    }

    /// Load a config file, resolving its preset and merging overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let preset_name = value
            .get("preset")
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Config("preset must be a string".into()))
            })
            .transpose()?
            .unwrap_or_else(|| "desk".to_string());
        if let Some(table) = value.as_table_mut() {
            table.remove("preset");
        }
        let base = Self::preset(&preset_name)?;
        let mut merged = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(format!("preset serialization failed: {e}")))?;
        deep_merge(&mut merged, value);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vqvae.validate()?;
        if self.unet.in_channels != self.vqvae.embed_dim {
            return Err(Error::Config(format!(
                "unet input channels ({}) must equal the latent embed dim ({})",
                self.unet.in_channels, self.vqvae.embed_dim
            )));
        }
        let f = self.vqvae.downsample_factor();
        for d in self.data.dims {
            if d == 0 || d % f != 0 {
                return Err(Error::Config(format!(
                    "data dims {:?} must be positive multiples of 2^levels = {f}",
                    self.data.dims
                )));
            }
        }
        self.data.id_family.parse::<crate::synth::SyntheticFamily>()?;
        for fam in &self.data.far_families {
            fam.parse::<crate::synth::SyntheticFamily>()?;
        }
        let schedule = crate::diffusion::NoiseSchedule::scaled_linear(self.schedule)?;
        self.scoring.validate(&schedule)?;
        Ok(())
    }

    /// Canonical serialized form, used for config hashing.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        crate::seeding::hash_bytes(self.canonical_toml().as_bytes())
    }

    /// Copy with the seed pushed into the per-stage training configs.
    pub fn with_seed_applied(mut self) -> RunConfig {
        self.vqvae_train.seed = self.seed;
        self.ddpm_train.seed = self.seed;
        self
    }
}

fn deep_merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn desk_preset() -> RunConfig {
    RunConfig {
        seed: 42,
        out_root: PathBuf::from("runs/desk"),
        workers: 0,
        deterministic: true,
        data: DataConfig {
            dims: [32, 32, 32],
            id_family: "head_like".into(),
            id_count: 250,
            split: [0.8, 0.12, 0.08],
            far_families: vec![
                "cuboid_field".into(),
                "sphere_grid".into(),
                "stripe_texture".into(),
            ],
            far_count: 10,
        },
        vqvae: VqConfig {
            levels: 3,
            channels: vec![8, 16, 32],
            embed_dim: 8,
            codebook_size: 64,
            commitment_beta: 0.25,
        },
        vqvae_train: VqTrainConfig {
            lr: 3e-4,
            batch_size: 8,
            max_epochs: 30,
            patience: 15,
            seed: 42,
        },
        unet: UnetConfig { in_channels: 8, channels: vec![32, 64], attention_cap: 512 },
        schedule: ScheduleParams::default(),
        ddpm_train: DdpmTrainConfig {
            lr: 3e-4,
            batch_size: 16,
            max_epochs: 120,
            patience: 15,
            seed: 42,
            val_draws: 4,
        },
        scoring: ScoringConfig::default(),
    }
}

/// Full-scale shape: 3-level VQ autoencoder with 128-channel levels and a
/// 256-entry codebook, (128, 256, 256)-channel UNet, batch sizes 64/112,
/// learning rates 3e-4 / 2.5e-5, long horizons with patience 15.
fn paper_shape_preset() -> RunConfig {
    RunConfig {
        seed: 42,
        out_root: PathBuf::from("runs/paper-shape"),
        workers: 0,
        deterministic: true,
        data: DataConfig {
            dims: [176, 208, 176],
            id_family: "head_like".into(),
            id_count: 683,
            split: [0.8, 0.1, 0.1],
            far_families: vec![
                "cuboid_field".into(),
                "sphere_grid".into(),
                "stripe_texture".into(),
            ],
            far_count: 22,
        },
        vqvae: VqConfig {
            levels: 3,
            channels: vec![128, 128, 128],
            embed_dim: 64,
            codebook_size: 256,
            commitment_beta: 0.25,
        },
        vqvae_train: VqTrainConfig {
            lr: 3e-4,
            batch_size: 64,
            max_epochs: 500,
            patience: 15,
            seed: 42,
        },
        unet: UnetConfig { in_channels: 64, channels: vec![128, 256, 256], attention_cap: 4096 },
        schedule: ScheduleParams::default(),
        ddpm_train: DdpmTrainConfig {
            lr: 2.5e-5,
            batch_size: 112,
            max_epochs: 12_000,
            patience: 15,
            seed: 42,
            val_draws: 4,
        },
        scoring: ScoringConfig::default(),
    }
}

//! Flat key-value run configuration.
//!
//! A config file is a TOML document without tables. Any key can be
//! overridden by an environment variable `NLOS_<KEY>` (key upper-cased); the
//! variable's text is parsed as a TOML value, falling back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{parse_condition_name, SourceImages, SplitCounts};
use crate::error::{Error, Result};
use crate::lightsim::{ConditionSpec, SceneGeometry};
use crate::losses::LossWeights;
use crate::networks::{Architecture, ModelFlags};

pub const ENV_PREFIX: &str = "NLOS_";

/// Every tunable of simulation, model, training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,

    /// Output directory of `simulate`.
    pub sim_root: PathBuf,
    /// `procedural` or a directory of source images.
    pub sim_images: String,
    pub sim_train: usize,
    pub sim_test: usize,
    /// Condition labels such as `70;1;dark;wall;occ`.
    pub sim_conditions: Vec<String>,
    pub sim_hidden_res: usize,
    pub sim_wall_res: usize,
    pub sim_hidden_plane_cm: f64,
    pub sim_wall_cm: f64,
    pub sim_geometry_seed: u64,

    pub stages: usize,
    pub base_width: usize,
    pub latent_channels: usize,
    pub code_dim: usize,
    pub cond_encoder_width: usize,
    pub disc_width: usize,
    pub perceptual_width: usize,
    pub spatial_modulation: bool,

    pub batch_size: usize,
    pub ae_epochs: usize,
    pub ae_lr_init: f64,
    pub ae_lr_final: f64,
    pub ae_beta1: f64,
    pub ae_beta2: f64,
    pub ae_weight_decay: f64,
    pub joint_epochs: usize,
    pub joint_lr_init: f64,
    pub joint_lr_final: f64,
    pub joint_beta1: f64,
    pub joint_beta2: f64,
    pub joint_weight_decay: f64,
    /// Global gradient-norm cap for the joint stage; 0 disables clipping.
    pub grad_clip: f64,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_vq: f64,
    pub lambda_gan: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,

    pub no_ot: bool,
    pub no_joint: bool,
    pub single_scale_modulation: bool,
    pub concat_modulation: bool,
    pub no_vq: bool,
    pub no_modulation: bool,
    pub freeze_decoder: bool,

    /// Write a JSON line per optimizer step (epoch records are always written).
    pub log_steps: bool,
}

pub fn desk_conditions() -> Vec<String> {
    ["70;1;dark;wall;occ", "100;1;dark;wall;occ", "70;2;daylight;wall;occ", "70;1;dark;whiteboard;occ"]
        .map(String::from)
        .to_vec()
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            manifest: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            sim_root: PathBuf::from("data"),
            sim_images: "procedural".into(),
            sim_train: 160,
            sim_test: 40,
            sim_conditions: desk_conditions(),
            sim_hidden_res: 16,
            sim_wall_res: 16,
            sim_hidden_plane_cm: 40.0,
            sim_wall_cm: 100.0,
            sim_geometry_seed: 7,
            stages: 4,
            base_width: 32,
            latent_channels: 32,
            code_dim: crate::codebook::DEFAULT_CODE_DIM,
            cond_encoder_width: 16,
            disc_width: 16,
            perceptual_width: 8,
            spatial_modulation: false,
            batch_size: 16,
            ae_epochs: 50,
            ae_lr_init: 1e-4,
            ae_lr_final: 1e-8,
            ae_beta1: 0.9,
            ae_beta2: 0.999,
            ae_weight_decay: 0.0,
            joint_epochs: 50,
            joint_lr_init: 1e-4,
            joint_lr_final: 1e-7,
            joint_beta1: 0.9,
            joint_beta2: 0.9,
            joint_weight_decay: 1e-4,
            grad_clip: 1.0,
            disc_steps: 1,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda_vq: w.lambda_vq,
            lambda_gan: w.lambda_gan,
            tau: w.tau,
            alpha: w.alpha,
            beta: w.beta,
            no_ot: false,
            no_joint: false,
            single_scale_modulation: false,
            concat_modulation: false,
            no_vq: false,
            no_modulation: false,
            freeze_decoder: true,
            log_steps: true,
        }
    }
}

fn env_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

impl TrainConfig {
    /// Parse TOML text and apply `NLOS_*` overrides from `env`.
    pub fn from_sources(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("config must be flat; `{k}` is a table")));
        }
        for (k, v) in env {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                table.insert(key.to_ascii_lowercase(), env_value(&v));
            }
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// File (or defaults when `path` is `None`) plus the process environment.
    /// Relative paths inside the file resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_sources(&text, std::env::vars())?;
        if let Some(dir) = path.and_then(Path::parent) {
            for p in [&mut cfg.manifest, &mut cfg.out_dir, &mut cfg.sim_root] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("batch_size", self.batch_size as f64),
            ("tau", self.tau),
            ("ae_lr_init", self.ae_lr_init),
            ("joint_lr_init", self.joint_lr_init),
            ("disc_steps", self.disc_steps as f64),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("ae_lr_final", self.ae_lr_final),
            ("joint_lr_final", self.joint_lr_final),
            ("ae_weight_decay", self.ae_weight_decay),
            ("joint_weight_decay", self.joint_weight_decay),
            ("grad_clip", self.grad_clip),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_vq", self.lambda_vq),
            ("lambda_gan", self.lambda_gan),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be a finite non-negative number, got {v}")));
            }
        }
        for (k, v) in [
            ("ae_beta1", self.ae_beta1),
            ("ae_beta2", self.ae_beta2),
            ("joint_beta1", self.joint_beta1),
            ("joint_beta2", self.joint_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML, paths excluded.
    pub fn hash(&self) -> String {
        let canonical = Self {
            manifest: PathBuf::new(),
            out_dir: PathBuf::new(),
            sim_root: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(&Sha256::digest(canonical.to_toml().as_bytes())[..8])
    }

    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            no_ot: self.no_ot,
            no_joint: self.no_joint,
            single_scale_modulation: self.single_scale_modulation,
            concat_modulation: self.concat_modulation,
            no_vq: self.no_vq,
            no_modulation: self.no_modulation,
        }
    }

    /// Configured weights with the terms removed by ablation flags zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: if self.no_ot { 0.0 } else { self.lambda1 },
            lambda2: self.lambda2,
            lambda_vq: if self.no_vq { 0.0 } else { self.lambda_vq },
            lambda_gan: if self.no_joint { 0.0 } else { self.lambda_gan },
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Decoder parameters stay fixed in the joint stage.
    pub fn decoder_frozen(&self) -> bool {
        self.freeze_decoder && !self.no_ot
    }

    pub fn architecture(&self, hidden_res: (usize, usize), wall_res: (usize, usize), n_conditions: usize) -> Architecture {
        Architecture {
            hidden_res,
            wall_res,
            channels: crate::dataset::CHANNELS,
            stages: self.stages,
            base_width: self.base_width,
            latent_channels: self.latent_channels,
            n_conditions,
            code_dim: self.code_dim,
            cond_encoder_width: self.cond_encoder_width,
            disc_width: self.disc_width,
            perceptual_width: self.perceptual_width,
            spatial_modulation: self.spatial_modulation,
        }
    }

    pub fn sim_conditions(&self) -> Result<Vec<ConditionSpec>> {
        if self.sim_conditions.is_empty() {
            return Err(Error::Config("`sim_conditions` is empty".into()));
        }
        Ok(self
            .sim_conditions
            .iter()
            .enumerate()
            .map(|(i, s)| parse_condition_name(i, s))
            .collect())
    }

    pub fn sim_geometry(&self) -> SceneGeometry {
        SceneGeometry {
            hidden_res: (self.sim_hidden_res, self.sim_hidden_res),
            wall_res: (self.sim_wall_res, self.sim_wall_res),
            hidden_plane_size_cm: (self.sim_hidden_plane_cm, self.sim_hidden_plane_cm),
            wall_size_cm: (self.sim_wall_cm, self.sim_wall_cm),
            geometry_seed: self.sim_geometry_seed,
        }
    }

    pub fn sim_source(&self) -> SourceImages {
        if self.sim_images == "procedural" {
            SourceImages::Procedural
        } else {
            SourceImages::Directory(PathBuf::from(&self.sim_images))
        }
    }

    pub fn sim_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.sim_train,
            test: self.sim_test,
        }
    }
}

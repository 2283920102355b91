//! Run configuration: model dimensions, loss weights, optimizer schedule,
//! and ablation switches. Serialized as JSON with exactly these field names.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{AttentionScale, CmfQuerySource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub image_size: usize,
    pub stem_channels: usize,
    pub feature_dim: usize,
    pub n_stack: usize,
    pub patch_sides: Vec<usize>,
    pub lambda_seg: f64,
    pub lambda_con: f64,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablate_mt: bool,
    pub ablate_ff: bool,
    pub ablate_cmf: bool,
    pub attention_scale: AttentionScale,
    pub cmf_query_source: CmfQuerySource,
    pub frames_per_clip: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 64,
            stem_channels: 32,
            feature_dim: 128,
            n_stack: 4,
            patch_sides: vec![16, 8, 4, 2],
            lambda_seg: 1.0,
            lambda_con: 0.001,
            lr: 1e-4,
            lr_decay_every: 40,
            lr_decay_factor: 0.1,
            batch_size: 24,
            epochs: 90,
            seed: 0,
            ablate_mt: false,
            ablate_ff: false,
            ablate_cmf: false,
            attention_scale: AttentionScale::Paper,
            cmf_query_source: CmfQuerySource::Rgb,
            frames_per_clip: 16,
        }
    }
}

impl Config {
    /// Small preset sized for minutes-scale CPU training. The architecture
    /// is the full four-scale, four-stage stack; only the dimensions shrink.
    pub fn desk_preset() -> Self {
        Config {
            image_size: 32,
            stem_channels: 8,
            feature_dim: 64,
            patch_sides: vec![8, 4, 2, 1],
            lr: 1e-3,
            epochs: 10,
            seed: 7,
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("image_size", self.image_size),
            ("stem_channels", self.stem_channels),
            ("feature_dim", self.feature_dim),
            ("n_stack", self.n_stack),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("frames_per_clip", self.frames_per_clip),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lambda_seg", self.lambda_seg),
            ("lambda_con", self.lambda_con),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative real")));
            }
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.lr_decay_factor <= 0.0 || self.lr_decay_factor > 1.0 {
            return Err(Error::Config("lr_decay_factor must be in (0, 1]".into()));
        }
        if self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 32 (stem and head each reduce by 4)",
                self.image_size
            )));
        }
        if self.stem_channels < 2 {
            return Err(Error::Config("stem_channels must be at least 2".into()));
        }
        let grid = self.image_size / 4;
        if self.patch_sides.is_empty() {
            return Err(Error::Config("patch_sides must not be empty".into()));
        }
        for &r in &self.patch_sides {
            if r == 0 || grid % r != 0 {
                return Err(Error::Config(format!(
                    "patch side {r} does not divide the {grid}x{grid} feature grid"
                )));
            }
        }
        Ok(())
    }

    /// Stable JSON rendering (fixed field order) used for hashing and
    /// checkpoint embedding.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Short hex digest identifying this configuration in reports.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex_prefix(&digest, 16)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

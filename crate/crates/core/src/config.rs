use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::SPATIAL_MULTIPLE;

/// Run configuration shared by every stage. Serialized as TOML with these
/// exact key names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// `(height, width)` of the BodyMap network at full scale.
    pub bodymap_resolution: (usize, usize),
    /// `(height, width)` of the garment synthesis network at full scale.
    pub regarsyn_resolution: (usize, usize),
    /// `(height, width)` used for CPU-scale runs.
    pub desk_resolution: (usize, usize),
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub clip_len_min: usize,
    pub clip_len_max: usize,
    pub residual_blocks: usize,
    /// Channel width of the first generator stage.
    pub base_width: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bodymap_resolution: (512, 384),
            regarsyn_resolution: (576, 432),
            desk_resolution: (96, 72),
            epochs: 40,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            clip_len_min: 8,
            clip_len_max: 60,
            residual_blocks: 4,
            base_width: 16,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len_min < 1 {
            return Err(Error::Config("clip_len_min must be at least 1".into()));
        }
        if self.clip_len_min > self.clip_len_max {
            return Err(Error::Config(format!(
                "clip_len_min {} exceeds clip_len_max {}",
                self.clip_len_min, self.clip_len_max
            )));
        }
        for (name, (h, w)) in [
            ("bodymap_resolution", self.bodymap_resolution),
            ("regarsyn_resolution", self.regarsyn_resolution),
            ("desk_resolution", self.desk_resolution),
        ] {
            if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
                return Err(Error::Config(format!(
                    "{name} {h}x{w} must be non-empty and divisible by {SPATIAL_MULTIPLE}"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_training_setup() {
        let c = PipelineConfig::default();
        assert_eq!(c.bodymap_resolution, (512, 384));
        assert_eq!(c.regarsyn_resolution, (576, 432));
        assert_eq!(c.epochs, 40);
        assert_eq!(c.learning_rate, 2e-4);
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.5, 0.999));
        assert_eq!((c.clip_len_min, c.clip_len_max), (8, 60));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_reproduces_defaults() {
        let c = PipelineConfig::default();
        let text = c.to_toml_string().unwrap();
        assert!(text.contains("learning_rate = 0.0002"), "{text}");
        assert!(text.contains("clip_len_max = 60"), "{text}");
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn invalid_clip_bounds_and_resolutions_are_rejected() {
        assert!(PipelineConfig::from_toml_str("clip_len_min = 0").is_err());
        assert!(PipelineConfig::from_toml_str("clip_len_min = 9\nclip_len_max = 8").is_err());
        assert!(PipelineConfig::from_toml_str("desk_resolution = [100, 72]").is_err());
        assert!(PipelineConfig::from_toml_str("unknown_key = 1").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}

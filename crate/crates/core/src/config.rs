//! Run configuration: one JSON file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::infer::InferConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "AFN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.json`; falls back to `$AFN_DATA_DIR`, then `data`.
    pub dir: Option<PathBuf>,
    /// Patches generated by `synth`.
    pub n: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n: 10,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolved_dir().join("manifest.json")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; when set, every module seed is derived from it by name.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

/// Named sub-seed so modules draw independent streams from one master seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies the master seed, then checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.data.synth.seed = sub_seed(seed, "synth");
            self.train.seed = sub_seed(seed, "train");
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if !(0.0..0.5).contains(&self.infer.overlap) {
            return Err(Error::InvalidArgument(format!(
                "overlap must lie in [0, 0.5), got {}",
                self.infer.overlap
            )));
        }
        Ok(self)
    }

    /// Writes the resolved config as `config.json` in `dir`.
    pub fn save_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.model.base_channels, 64);
        assert_eq!(c.model.steps, 4);
        assert_eq!(c.model.residual_units, 16);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.lr_decay, 0.5);
        assert_eq!(c.train.lr_milestones, vec![45, 60, 70]);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.infer.overlap, 0.25);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"base_channels": 8, "attention_widths": [32, 32, 64, 16]}}"#).unwrap();
        assert_eq!(c.model.base_channels, 8);
        assert_eq!(c.model.steps, 4);
        assert!(c.resolve().is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn master_seed_derives_distinct_sub_seeds() {
        let c = RunConfig {
            seed: Some(7),
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_ne!(c.data.synth.seed, c.train.seed);
        assert_eq!(c.train.seed, sub_seed(7, "train"));
    }
}

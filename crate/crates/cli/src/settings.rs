//! The training half of the shared config file. The service keys live at
//! the top level of the same file; the tables here sit beside them.

use std::path::{Path, PathBuf};

use anyhow::Context;
use musfill_core::{ModelConfig, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct TrainPaths {
    /// Output directory of `dataset build`.
    pub dataset: PathBuf,
    /// `with_controls` or `without_controls`.
    pub variant: String,
    pub pretrain_checkpoint: PathBuf,
    pub finetune_checkpoint: PathBuf,
    /// JSON lines `{step, stage, loss}`, appended to.
    pub log: PathBuf,
}

impl Default for TrainPaths {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            variant: "with_controls".into(),
            pretrain_checkpoint: "checkpoints/pretrain.ckpt".into(),
            finetune_checkpoint: "checkpoints/finetune.ckpt".into(),
            log: "checkpoints/train.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: TrainPaths,
}

impl TrainSettings {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let s: Self = toml::from_str(text)?;
        s.model.validate()?;
        s.train.validate()?;
        anyhow::ensure!(
            s.paths.variant == "with_controls" || s.paths.variant == "without_controls",
            "paths.variant must be with_controls or without_controls, got {:?}",
            s.paths.variant
        );
        Ok(s)
    }

    /// Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut s = Self::from_toml(&text).with_context(|| format!("bad config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut s.paths.dataset,
            &mut s.paths.pretrain_checkpoint,
            &mut s.paths.finetune_checkpoint,
            &mut s.paths.log,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn service_keys_are_ignored_and_tables_default() {
        let s = TrainSettings::from_toml("port = 1\ndata_dir = \"x\"\n[train]\nseed = 9\n").unwrap();
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(s.model, ModelConfig::toy());
    }

    #[test]
    fn bad_variant_is_rejected() {
        assert!(TrainSettings::from_toml("[paths]\nvariant = \"both\"\n").is_err());
    }
}

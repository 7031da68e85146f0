use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "MUSFILL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad value for {key}: {value:?}")]
    Env { key: String, value: String },
    #[error("{0} must be positive")]
    Zero(&'static str),
}

/// Service settings. The same TOML file may carry other tables (model and
/// training settings for the command line tool); they are ignored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    pub max_concurrent_decodes: usize,
    /// Directory of sample MIDI files offered by `GET /v1/testset`.
    pub testset_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("musfill-data"),
            checkpoint: None,
            host: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: 1 << 20,
            max_concurrent_decodes: 2,
            testset_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Read a config file (relative paths inside it resolve against its
    /// directory), then apply `MUSFILL_*` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut c = Self::from_toml(&text)?;
                c.resolve_relative(p.parent().unwrap_or(Path::new(".")));
                c
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        self.checkpoint.as_mut().map(fix);
        self.testset_dir.as_mut().map(fix);
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parsed<T: std::str::FromStr>(key: &str, value: String) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Env {
                key: key.to_string(),
                value,
            })
        }
        let get = |name: &str| {
            let key = format!("{ENV_PREFIX}{name}");
            var(&key).map(|v| (key, v))
        };
        if let Some((_, v)) = get("DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some((_, v)) = get("CHECKPOINT") {
            self.checkpoint = Some(v.into());
        }
        if let Some((_, v)) = get("HOST") {
            self.host = v;
        }
        if let Some((_, v)) = get("TESTSET_DIR") {
            self.testset_dir = Some(v.into());
        }
        if let Some((k, v)) = get("PORT") {
            self.port = parsed(&k, v)?;
        }
        if let Some((k, v)) = get("MAX_UPLOAD_BYTES") {
            self.max_upload_bytes = parsed(&k, v)?;
        }
        if let Some((k, v)) = get("MAX_CONCURRENT_DECODES") {
            self.max_concurrent_decodes = parsed(&k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_upload_bytes == 0 {
            return Err(ConfigError::Zero("max_upload_bytes"));
        }
        if self.max_concurrent_decodes == 0 {
            return Err(ConfigError::Zero("max_concurrent_decodes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn other_tables_are_ignored() {
        let c = ServiceConfig::from_toml("port = 9000\n[model]\nnum_layers = 2\n").unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.max_concurrent_decodes, 2);
    }

    #[test]
    fn env_overrides_file_values() {
        let mut c = ServiceConfig::from_toml("port = 9000\nhost = \"0.0.0.0\"").unwrap();
        c.apply_env(|k| match k {
            "MUSFILL_PORT" => Some("7000".into()),
            "MUSFILL_CHECKPOINT" => Some("/m.ckpt".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!((c.port, c.host.as_str()), (7000, "0.0.0.0"));
        assert_eq!(c.checkpoint.as_deref(), Some(Path::new("/m.ckpt")));
        assert!(c
            .apply_env(|k| (k == "MUSFILL_PORT").then(|| "x".to_string()))
            .is_err());
    }

    #[test]
    fn zero_limits_are_rejected() {
        let c = ServiceConfig {
            max_concurrent_decodes: 0,
            ..ServiceConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

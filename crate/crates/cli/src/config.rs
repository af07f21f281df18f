use std::path::{Component, Path, PathBuf};

use serde::Deserialize;
use spa_core::model::ModelConfig;
use spa_core::train::{PretrainConfig, TrainConfig};

/// Shared settings read from `--config` or `SPA_CONFIG`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub seed: u64,
    /// Every artifact path is resolved under this directory.
    pub out_dir: PathBuf,
    /// Relative to the config file.
    pub latency_profile: Option<PathBuf>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            latency_profile: None,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads `explicit`, else `SPA_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, String> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os("SPA_CONFIG").map(PathBuf::from));
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let (Some(lp), Some(dir)) = (&cfg.latency_profile, path.parent()) {
            cfg.latency_profile = Some(dir.join(lp));
        }
        Ok(cfg)
    }

    /// Relative paths join `out_dir`; absolute inputs are used as given.
    pub fn input(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Like `input`, but the result must stay inside `out_dir`.
    pub fn output(&self, p: &Path) -> Result<PathBuf, String> {
        let escapes = p.components().any(|c| matches!(c, Component::ParentDir));
        let inside = !p.is_absolute() || p.starts_with(&self.out_dir);
        if escapes || !inside {
            return Err(format!(
                "output path {} is outside the output directory {}",
                p.display(),
                self.out_dir.display()
            ));
        }
        Ok(self.input(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_unknown_keys() {
        let c = CliConfig::parse("seed = 3\n[model]\nn_layers = 2\n[train]\nepochs = 4\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.model.d_model, ModelConfig::default().d_model);
        assert_eq!(c.train.epochs, 4);
        assert!(CliConfig::parse("sed = 3\n").is_err());
        assert!(CliConfig::parse("[model]\nlayers = 2\n").is_err());
    }

    #[test]
    fn outputs_stay_inside() {
        let c = CliConfig {
            out_dir: "/tmp/run".into(),
            ..Default::default()
        };
        assert_eq!(c.output(Path::new("a/b.ckpt")).unwrap(), PathBuf::from("/tmp/run/a/b.ckpt"));
        assert!(c.output(Path::new("/tmp/run/x")).is_ok());
        assert!(c.output(Path::new("../x")).is_err());
        assert!(c.output(Path::new("/etc/x")).is_err());
    }
}

//! The run configuration file and its command-line overrides.

use std::path::{Path, PathBuf};

use dsu::augment::{AugKind, AugmentorConfig};
use dsu::net::NetworkSpec;
use dsu::train::{DatasetConfig, SweepKind, TrainConfig};
use dsu::{DsuError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub held_out: String,
    pub val_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: t.seed,
            held_out: t.held_out,
            val_fraction: t.val_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// One of `p`, `positions`, `batch`, `method`.
    pub kind: Option<String>,
    /// Seeds every swept configuration runs with; `training.seed` when empty.
    pub seeds: Vec<u64>,
    /// Held-out domains each run is repeated for; `training.held_out` when empty.
    pub held_out: Vec<String>,
    pub p_values: Vec<f64>,
    pub slot_sets: Vec<Vec<usize>>,
    pub batch_sizes: Vec<usize>,
    pub methods: Vec<AugKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: None,
            seeds: Vec::new(),
            held_out: Vec::new(),
            p_values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            slot_sets: vec![vec![], vec![0, 1, 2, 3], vec![1, 2, 3, 4], vec![2, 3, 4, 5], vec![0, 1, 2, 3, 4, 5]],
            batch_sizes: vec![8, 16, 32],
            methods: AugKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub augmentor: AugmentorConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            dataset: DatasetConfig::default(),
            network: NetworkSpec::default(),
            augmentor: AugmentorConfig::default(),
            training: TrainingSection::default(),
            sweep: SweepSection::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(DsuError::Config(format!(
                "schema_version `{}` is not supported (expected `{SCHEMA_VERSION}`)",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| DsuError::io(p, e))?;
                Self::parse(&text).map_err(|e| match e {
                    DsuError::Json(j) => DsuError::Config(format!("{}: {j}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// Applies `dotted.path=value` overrides. Values parse as JSON and fall
    /// back to plain strings; paths must already exist.
    pub fn with_overrides(self, sets: &[(String, String)]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self)?;
        for (path, raw) in sets {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut node = &mut root;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(key))
                    .ok_or_else(|| DsuError::Config(format!("unknown config key `{path}`")))?;
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| DsuError::Config(format!("override: {e}")))?;
        Self::parse(&serde_json::to_string(&cfg)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: t.seed,
            held_out: t.held_out.clone(),
            val_fraction: t.val_fraction,
            aug: self.augmentor.clone(),
            net: self.network.clone(),
            dataset: self.dataset.clone(),
        }
    }

    pub fn sweep_kind(&self, flag: Option<&str>) -> Result<SweepKind> {
        flag.or(self.sweep.kind.as_deref())
            .ok_or_else(|| DsuError::Config("no sweep given (use --sweep or sweep.kind)".into()))?
            .parse()
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        Sha256::digest(&bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfigFile::parse(r#"{"schema_version":"1","training":{"epoch":3}}"#).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(RunConfigFile::parse(r#"{"schema_version":"9"}"#).is_err());
        assert!(RunConfigFile::parse("{}").is_err());
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = RunConfigFile::default()
            .with_overrides(&[
                ("augmentor.p".into(), "0.25".into()),
                ("training.held_out".into(), "art".into()),
                ("network.insert_positions".into(), "[1,2]".into()),
            ])
            .unwrap();
        assert_eq!(cfg.augmentor.p, 0.25);
        assert_eq!(cfg.training.held_out, "art");
        assert_eq!(cfg.network.insert_positions, vec![1, 2]);
        assert!(RunConfigFile::default()
            .with_overrides(&[("training.nope".into(), "1".into())])
            .is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfigFile::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.training.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}

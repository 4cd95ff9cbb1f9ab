use std::path::{Path, PathBuf};

use gvse_core::data::{DatasetPaths, SyntheticSpec};
use gvse_core::graph::BinarizeMode;
use gvse_core::model::ModelConfig;
use gvse_core::train::TrainConfig;
use gvse_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(DatasetPaths),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Share of every seen class held out for seen-class testing.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphType {
    #[default]
    Attribute,
    Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    #[serde(rename = "type")]
    pub kind: GraphType,
    /// Normalised-PMI edge threshold for the attribute graph.
    pub delta: f64,
    pub binarize: BinarizeMode,
    /// Cosine threshold for the category graph.
    pub category_threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            kind: GraphType::Attribute,
            delta: 0.75,
            binarize: BinarizeMode::Nonzero,
            category_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: gvse_core::embed::DEFAULT_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("gvse-out"),
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            embedding: EmbeddingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} outside [0, 1)",
                self.data.test_fraction
            )));
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.validate()?;
            if spec.image_size != self.model.input_height || spec.image_size != self.model.input_width {
                return Err(Error::Config(format!(
                    "synthetic images are {0}x{0} but the model expects {1}x{2}",
                    spec.image_size, self.model.input_height, self.model.input_width
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.graph.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.graph.delta)));
        }
        if !(-1.0..=1.0).contains(&self.graph.category_threshold) {
            return Err(Error::Config(format!(
                "category_threshold {} outside [-1, 1]",
                self.graph.category_threshold
            )));
        }
        if self.embedding.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"seed": 1, "sede": 2}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train": {"gama": 0.5}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ranges_checked() {
        assert!(ExperimentConfig::from_json(r#"{"graph": {"delta": 1.5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"gamma": -1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"embedding": {"dim": 0}}"#).is_err());
    }

    #[test]
    fn digest_ignores_out_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { seed: 8, ..a.clone() };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}

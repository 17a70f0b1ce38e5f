//! Run configuration: one JSON document shared by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use s2d_core::net::NoiseSpec;
use s2d_core::training::{DistillKind, ExperimentConfig, ModelSpec, TrainKind};
use serde::{Deserialize, Serialize};

use crate::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: ExperimentConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory receiving every artifact.
    pub output: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Dataset locations and the synthetic generator. Paths left unset point at
/// the files `gen-data` writes into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Named OOD sets; empty means the generated ring.
    pub ood: BTreeMap<String, PathBuf>,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, test: None, ood: BTreeMap::new(), generator: GeneratorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Explicit class means. When set, `classes`, `dim` and `overlap` are unused.
    pub means: Option<Vec<Vec<f64>>>,
    pub classes: usize,
    pub dim: usize,
    pub overlap: f64,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub ood_n: usize,
    pub ood_radius: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        // two overlapping classes and one well separated, as in the desk experiment
        Self {
            means: Some(vec![vec![-1.5, 0.0], vec![1.5, 0.0], vec![0.0, 6.0]]),
            classes: 3,
            dim: 2,
            overlap: 0.5,
            n_train_per_class: 300,
            n_test_per_class: 300,
            ood_n: 600,
            ood_radius: 12.0,
            seed: 0,
        }
    }
}

/// How far unit-variance clusters reach, in standard deviations.
const SUPPORT_SIGMAS: f64 = 3.0;

impl GeneratorConfig {
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        match &self.means {
            Some(m) => m.clone(),
            None => s2d_core::data::circle_means(self.classes, self.dim, s2d_core::data::mixture_radius(self.overlap)),
        }
    }

    /// Radius containing the in-distribution clusters.
    pub fn support_radius(&self) -> f64 {
        let far = self.class_means().iter().map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        far + SUPPORT_SIGMAS
    }

    fn validate(&self) -> Result<(), ValidationError> {
        match &self.means {
            Some(m) => {
                let d = m.first().map_or(0, Vec::len);
                if m.len() < 2 || d < 2 || m.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
                    return invalid("data.generator.means needs at least two finite means of equal dimension >= 2");
                }
            }
            None => {
                if self.classes < 2 || self.dim < 2 {
                    return invalid("data.generator needs classes >= 2 and dim >= 2");
                }
                if !(0.0..=1.0).contains(&self.overlap) {
                    return invalid(format!("data.generator.overlap must be in [0, 1], got {}", self.overlap));
                }
            }
        }
        if self.n_train_per_class == 0 || self.n_test_per_class == 0 || self.ood_n == 0 {
            return invalid("data.generator sample counts must be positive");
        }
        if !(self.ood_radius > self.support_radius()) {
            return invalid(format!(
                "data.generator.ood_radius {} must exceed the in-distribution support radius {:.3}",
                self.ood_radius,
                self.support_radius()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: TrainKind,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub noise: NoiseSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        Self { kind: TrainKind::S2d, hidden: spec.hidden, dropout: spec.dropout, noise: spec.noise }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec { hidden: self.hidden.clone(), dropout: self.dropout, noise: self.noise }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub kind: DistillKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { kind: DistillKind::H2dDir }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every checkpoint on its own, aggregated across checkpoints.
    Single,
    /// All checkpoints as one deep ensemble.
    Ensemble,
    /// Every checkpoint as an implicit ensemble of dropout masks.
    McDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Samples for Gaussian-head students.
    pub mc_samples: usize,
    pub mc_dropout_samples: usize,
    pub ece_bins: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Single,
            mc_samples: s2d_core::gaussian::DEFAULT_MC_SAMPLES,
            mc_dropout_samples: 50,
            ece_bins: s2d_core::metrics::DEFAULT_ECE_BINS,
            histogram_bins: 20,
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ValidationError> {
    Err(ValidationError(msg.into()))
}

impl RunConfig {
    /// Reads and fully validates a config file.
    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let text = std::fs::read_to_string(path).map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ValidationError(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.data.generator.validate()?;
        self.train.validate().map_err(|e| ValidationError(format!("train: {e}")))?;
        self.model.noise.validate().map_err(|e| ValidationError(format!("model.noise: {e}")))?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return invalid("model.hidden needs at least one non-empty layer");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return invalid(format!("model.dropout must be in [0, 1), got {}", self.model.dropout));
        }
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return invalid("seeds must be distinct");
        }
        if self.eval.mc_samples == 0 || self.eval.mc_dropout_samples == 0 || self.eval.ece_bins == 0 || self.eval.histogram_bins == 0 {
            return invalid("eval sample and bin counts must be positive");
        }
        if self.data.ood.keys().any(|k| k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
            return invalid("OOD set names may only use letters, digits, '_' and '-'");
        }
        Ok(())
    }

    pub fn train_path(&self) -> PathBuf {
        self.data.train.clone().unwrap_or_else(|| self.output.join("train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.data.test.clone().unwrap_or_else(|| self.output.join("test.csv"))
    }

    pub fn ood_paths(&self) -> Vec<(String, PathBuf)> {
        if self.data.ood.is_empty() {
            vec![("ood_ring".into(), self.output.join("ood_ring.csv"))]
        } else {
            self.data.ood.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        }
    }

    /// Training hyper-parameters for one seed.
    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig { seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, ValidationError> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| ValidationError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse(r#"{"output": "out"}"#).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.train.mu, 1.28e-4);
        assert_eq!(cfg.model.kind, TrainKind::S2d);
        assert_eq!(cfg.train_path(), PathBuf::from("out/train.csv"));
        assert_eq!(cfg.ood_paths()[0].0, "ood_ring");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse(r#"{"output": "o", "extra": 1}"#).is_err());
        assert!(parse(r#"{"output": "o", "train": {"lr_typo": 1}}"#).is_err());
        assert!(parse(r#"{"output": "o", "data": {"generator": {"means": null, "overlap": 2.0}}}"#).is_err());
        assert!(parse(r#"{"output": "o", "data": {"generator": {"ood_radius": 5.0}}}"#).is_err());
        assert!(parse(r#"{"output": "o", "seeds": []}"#).is_err());
        assert!(parse(r#"{"output": "o", "seeds": [1, 1]}"#).is_err());
        assert!(parse(r#"{"output": "o", "model": {"dropout": 1.0}}"#).is_err());
        assert!(parse(r#"{"output": "o", "train": {"m_teacher": 1}}"#).is_err());
        assert!(parse(r#"{"seeds": [0]}"#).is_err());
    }

    #[test]
    fn circle_generator_support() {
        let g = GeneratorConfig { means: None, classes: 4, overlap: 0.0, ood_radius: 20.0, ..Default::default() };
        assert!((g.support_radius() - 11.0).abs() < 1e-12);
        assert!(g.validate().is_ok());
        assert_eq!(g.class_means().len(), 4);
    }
}

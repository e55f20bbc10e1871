//! One JSON configuration file drives the whole pipeline. Every field has a
//! default, so a partial (or missing) config is valid; command-line flags
//! override file values, which override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::features::LntConfig;
use crate::net::Stage2TrainConfig;
use crate::phantom::PhantomConfig;
use crate::preprocess::PreprocessConfig;
use crate::radhop::RadHopConfig;
use crate::stage1::Stage1Config;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// phantom volumes + split manifests live here
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
    /// master seed; every derived seed is a deterministic function of it
    pub seed: u64,
    pub n_cases: usize,
    pub split: (f64, f64, f64),
    /// worker-thread request; results never depend on it
    pub threads: usize,
    pub preprocess: PreprocessConfig,
    pub phantom: PhantomConfig,
    pub radhop: RadHopConfig,
    /// features kept per modality after discriminability ranking
    pub top_k: usize,
    pub lnt: LntConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: PathBuf::from("data"),
            model_dir: PathBuf::from("models"),
            report_dir: PathBuf::from("reports"),
            seed: 0,
            n_cases: 100,
            split: (0.6, 0.2, 0.2),
            threads: 1,
            preprocess: PreprocessConfig::default(),
            phantom: PhantomConfig::default(),
            radhop: RadHopConfig::default(),
            top_k: 800,
            lnt: LntConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = crate::artifacts::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b < 0.0 || c < 0.0 {
            return Err(PipelineError::InvalidInput(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if self.top_k == 0 {
            return Err(PipelineError::InvalidInput("top_k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stage1.t_p) {
            return Err(PipelineError::InvalidInput(format!(
                "stage1.t_p = {} must lie in [0, 1]",
                self.stage1.t_p
            )));
        }
        if self.stage2.gamma < 0.0 {
            return Err(PipelineError::InvalidInput(format!(
                "stage2.gamma = {} must be non-negative",
                self.stage2.gamma
            )));
        }
        Ok(())
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir.join("train.json")
    }

    pub fn val_manifest(&self) -> PathBuf {
        self.data_dir.join("val.json")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.data_dir.join("test.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_published_constants() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.radhop.window, 24);
        assert_eq!(cfg.top_k, 800);
        assert_eq!(cfg.lnt.n_out, 20);
        assert_eq!(cfg.lnt.subset, 200);
        assert_eq!(cfg.stage1.t_p, 0.3);
        assert_eq!(cfg.stage1.stride, 4);
        assert_eq!(cfg.stage2.gamma, 0.95);
        assert_eq!(cfg.stage2.learning_rate, 1e-4);
        assert_eq!(cfg.stage2.batch_size, 4096);
        assert_eq!(cfg.stage2.epochs, 20);
        assert_eq!(cfg.stage2.loss, "wrmse");
        assert_eq!(
            cfg.preprocess.target_spacing_mm,
            (3.0, 0.25, 0.25)
        );
        assert_eq!(cfg.preprocess.lo_percentile, 0.05);
        assert_eq!(cfg.preprocess.hi_percentile, 99.5);
    }

    #[test]
    fn partial_config_file_fills_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 7, "stage2": {"loss": "mse"}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stage2.loss, "mse");
        // untouched fields keep their defaults
        assert_eq!(cfg.stage2.gamma, 0.95);
        assert_eq!(cfg.top_k, 800);
    }

    #[test]
    fn bad_split_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.split = (0.5, 0.2, 0.2);
        assert!(cfg.validate().is_err());
        cfg.split = (0.6, 0.2, 0.2);
        cfg.stage1.t_p = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}

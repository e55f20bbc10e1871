//! Voxel classifier strategies. Each variant implements [`VoxelModel`] and is
//! registered by name; training and deserialization dispatch through the
//! registry, so the classifier kind is a runtime configuration choice.

mod gbdt;
mod logistic;

pub use gbdt::{GbdtConfig, GbdtModel};
pub use logistic::{LogisticConfig, LogisticModel};

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::features::FeatureMatrix;

/// A trained voxel classifier: features in, probability out.
pub trait VoxelModel: Send + Sync {
    fn kind(&self) -> &'static str;
    fn predict_prob(&self, features: &[f32]) -> f64;
    fn to_value(&self) -> serde_json::Value;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// registry name: "gbdt" or "logistic"
    pub kind: String,
    pub gbdt: GbdtConfig,
    pub logistic: LogisticConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: "gbdt".to_string(),
            gbdt: GbdtConfig::default(),
            logistic: LogisticConfig::default(),
        }
    }
}

type TrainFn = fn(&FeatureMatrix, &[u8], &ClassifierConfig, u64) -> Result<Box<dyn VoxelModel>>;
type LoadFn = fn(&serde_json::Value) -> Result<Box<dyn VoxelModel>>;

struct StrategyEntry {
    name: &'static str,
    train: TrainFn,
    load: LoadFn,
}

static REGISTRY: &[StrategyEntry] = &[
    StrategyEntry {
        name: "gbdt",
        train: gbdt::train,
        load: gbdt::load,
    },
    StrategyEntry {
        name: "logistic",
        train: logistic::train,
        load: logistic::load,
    },
];

pub fn known_classifiers() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

fn entry(kind: &str) -> Result<&'static StrategyEntry> {
    REGISTRY
        .iter()
        .find(|e| e.name == kind)
        .ok_or_else(|| PipelineError::UnknownStrategy {
            registry: "voxel classifier",
            kind: kind.to_string(),
            known: known_classifiers(),
        })
}

pub fn train_voxel_classifier(
    features: &FeatureMatrix,
    labels: &[u8],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Box<dyn VoxelModel>> {
    assert_eq!(features.rows, labels.len());
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(PipelineError::InvalidInput(
            "classifier training needs both classes".into(),
        ));
    }
    (entry(&cfg.kind)?.train)(features, labels, cfg, seed)
}

/// Rebuild a model from its serialized `{"kind": ..., ...}` JSON value.
pub fn load_voxel_classifier(value: &serde_json::Value) -> Result<Box<dyn VoxelModel>> {
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| PipelineError::InvalidInput("classifier JSON lacks a kind field".into()))?;
    (entry(kind)?.load)(value)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

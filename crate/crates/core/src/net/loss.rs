//! Residue-regression losses. Variants are registered by name so the loss is
//! a runtime configuration choice, mirroring the classifier registry.

use crate::error::{PipelineError, Result};

/// Batch loss over predicted and target values in (0, 1).
pub trait ResidueLoss: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns the batch loss and writes dL/d prediction per sample.
    fn batch(&self, preds: &[f64], targets: &[f64], grads: &mut [f64]) -> f64;
}

/// Weighted residue MSE: each sample carries weight (-ln t)^(-gamma), which
/// grows as the target approaches 1, so large positive residues (missed
/// lesions) dominate the objective.
pub struct WrMse {
    pub gamma: f64,
}

const TARGET_CLAMP: f64 = 1e-4;

fn clamp_target(t: f64) -> f64 {
    t.clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP)
}

impl ResidueLoss for WrMse {
    fn name(&self) -> &'static str {
        "wrmse"
    }

    fn batch(&self, preds: &[f64], targets: &[f64], grads: &mut [f64]) -> f64 {
        assert_eq!(preds.len(), targets.len());
        assert_eq!(preds.len(), grads.len());
        let n = preds.len() as f64;
        let mut loss = 0.0;
        for ((&p, &t), g) in preds.iter().zip(targets).zip(grads.iter_mut()) {
            let t = clamp_target(t);
            let weight = (-t.ln()).powf(-self.gamma);
            let diff = p - t;
            loss += diff * diff * weight;
            *g = 2.0 * diff * weight / n;
        }
        loss / n
    }
}

/// Plain mean squared error (the gamma = 0 special case).
pub struct Mse;

impl ResidueLoss for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn batch(&self, preds: &[f64], targets: &[f64], grads: &mut [f64]) -> f64 {
        assert_eq!(preds.len(), targets.len());
        assert_eq!(preds.len(), grads.len());
        let n = preds.len() as f64;
        let mut loss = 0.0;
        for ((&p, &t), g) in preds.iter().zip(targets).zip(grads.iter_mut()) {
            let diff = p - clamp_target(t);
            loss += diff * diff;
            *g = 2.0 * diff / n;
        }
        loss / n
    }
}

type LossCtor = fn(gamma: f64) -> Box<dyn ResidueLoss>;

static REGISTRY: &[(&str, LossCtor)] = &[
    ("wrmse", |gamma| Box::new(WrMse { gamma })),
    ("mse", |_| Box::new(Mse)),
];

pub fn known_losses() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn make_loss(kind: &str, gamma: f64) -> Result<Box<dyn ResidueLoss>> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == kind)
        .map(|(_, ctor)| ctor(gamma))
        .ok_or_else(|| PipelineError::UnknownStrategy {
            registry: "residue loss",
            kind: kind.to_string(),
            known: known_losses(),
        })
}

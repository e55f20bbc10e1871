//! L2-regularized logistic regression trained by full-batch gradient descent
//! with a backtracking step size. Test fallback for the boosted trees.

use serde::{Deserialize, Serialize};

use super::{sigmoid, ClassifierConfig, VoxelModel};
use crate::error::{PipelineError, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-4,
            tolerance: 1e-6,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub kind: String,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl VoxelModel for LogisticModel {
    fn kind(&self) -> &'static str {
        "logistic"
    }

    fn predict_prob(&self, features: &[f32]) -> f64 {
        let mut z = self.intercept;
        for (&w, &x) in self.weights.iter().zip(features) {
            z += w * x as f64;
        }
        sigmoid(z)
    }

    fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("logistic model serializes")
    }
}

pub(super) fn train(
    features: &FeatureMatrix,
    labels: &[u8],
    cfg: &ClassifierConfig,
    _seed: u64,
) -> Result<Box<dyn VoxelModel>> {
    let c = &cfg.logistic;
    let n = features.rows;
    let d = features.cols;
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut lr = 1.0f64;
    let mut loss = loss_value(features, labels, &w, b, c.l2);
    let mut grad_w = vec![0.0f64; d];
    for _ in 0..c.max_iters {
        grad_w.iter_mut().for_each(|x| *x = 0.0);
        let mut grad_b = 0.0;
        for i in 0..n {
            let row = features.row(i);
            let mut z = b;
            for (&wj, &x) in w.iter().zip(row) {
                z += wj * x as f64;
            }
            let err = sigmoid(z) - labels[i] as f64;
            grad_b += err;
            for (gj, &x) in grad_w.iter_mut().zip(row) {
                *gj += err * x as f64;
            }
        }
        grad_b /= n as f64;
        let mut grad_inf = grad_b.abs();
        for (gj, &wj) in grad_w.iter_mut().zip(&w) {
            *gj = *gj / n as f64 + c.l2 * wj;
            grad_inf = grad_inf.max(gj.abs());
        }
        if grad_inf < c.tolerance {
            break;
        }
        // backtracking line search on the full objective
        loop {
            let cand_w: Vec<f64> = w.iter().zip(&grad_w).map(|(wj, gj)| wj - lr * gj).collect();
            let cand_b = b - lr * grad_b;
            let cand_loss = loss_value(features, labels, &cand_w, cand_b, c.l2);
            if cand_loss <= loss || lr < 1e-12 {
                w = cand_w;
                b = cand_b;
                loss = cand_loss;
                lr = (lr * 2.0).min(1e3);
                break;
            }
            lr *= 0.5;
        }
    }
    Ok(Box::new(LogisticModel {
        kind: "logistic".to_string(),
        weights: w,
        intercept: b,
    }))
}

pub(super) fn load(value: &serde_json::Value) -> Result<Box<dyn VoxelModel>> {
    let model: LogisticModel = serde_json::from_value(value.clone())
        .map_err(|e| PipelineError::InvalidInput(format!("bad logistic model JSON: {e}")))?;
    Ok(Box::new(model))
}

fn loss_value(features: &FeatureMatrix, labels: &[u8], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = features.rows;
    let mut loss = 0.0;
    for i in 0..n {
        let row = features.row(i);
        let mut z = b;
        for (&wj, &x) in w.iter().zip(row) {
            z += wj * x as f64;
        }
        // numerically stable log(1 + exp(.))
        let y = labels[i] as f64;
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    loss / n as f64 + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>()
}

//! RMSProp optimizer and the stage-2 training loop with validation-AUROC
//! model selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{make_loss, ResidueLoss};
use super::{Cache, Network};
use crate::error::{PipelineError, Result};
use crate::eval::auroc;
use crate::roipatch::prediction_to_residue;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2TrainConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// residue loss registry name
    pub loss: String,
    pub gamma: f64,
    /// image-space variants per training ROI (the first is the identity)
    pub augmentations_per_roi: usize,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        // published constants; they assume a corpus of ~1e5 ROIs, so small
        // synthetic corpora should scale batch_size/learning_rate/epochs to
        // keep a comparable number of optimizer updates
        Stage2TrainConfig {
            learning_rate: 1e-4,
            rho: 0.9,
            epsilon: 1e-8,
            batch_size: 4096,
            epochs: 20,
            loss: "wrmse".to_string(),
            gamma: 0.95,
            augmentations_per_roi: 8,
        }
    }
}

/// RMSProp with a per-parameter squared-gradient accumulator.
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(n_params: usize, learning_rate: f64, rho: f64, epsilon: f64) -> RmsProp {
        RmsProp {
            learning_rate,
            rho,
            epsilon,
            acc: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.acc.len());
        assert_eq!(grads.len(), self.acc.len());
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *p -= self.learning_rate * g / (a.sqrt() + self.epsilon);
        }
    }
}

/// One training ROI variant: network input plus its regression target.
pub struct TrainSample {
    pub input: Vec<f64>,
    pub target: f64,
}

/// One validation ROI: the correction is applied to `p_roi` and the corrected
/// probability is scored against the ROI label.
pub struct ValSample {
    pub input: Vec<f64>,
    pub p_roi: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub selected: bool,
}

/// Corrected probability of one ROI given the raw network output.
pub fn corrected_prob(p_roi: f64, raw_prediction: f64) -> f64 {
    (p_roi + prediction_to_residue(raw_prediction)).clamp(0.0, 1.0)
}

fn val_metric(net: &Network, val: &[ValSample], cache: &mut Cache) -> f64 {
    if val.is_empty() {
        return 0.5;
    }
    let scores: Vec<f64> = val
        .iter()
        .map(|s| corrected_prob(s.p_roi, net.forward(&s.input, cache)))
        .collect();
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    auroc(&scores, &labels).unwrap_or(0.5)
}

/// Train the residue regressor. Deterministic given inputs and `seed`; the
/// returned network carries the parameters of the epoch with the best
/// validation AUROC (ties keep the earlier epoch). `epochs = 0` returns the
/// freshly initialized network.
pub fn train_stage2(
    train: &[TrainSample],
    val: &[ValSample],
    cfg: &Stage2TrainConfig,
    seed: u64,
) -> Result<(Network, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(PipelineError::InvalidInput(
            "stage-2 training needs at least one ROI sample".into(),
        ));
    }
    let in_len = train[0].input.len();
    if in_len % (13 * 13) != 0 {
        return Err(PipelineError::DimsMismatch(format!(
            "stage-2 input length {in_len} is not a 13 x 13 grid"
        )));
    }
    let in_channels = in_len / (13 * 13);
    let loss: Box<dyn ResidueLoss> = make_loss(&cfg.loss, cfg.gamma)?;
    let mut net = Network::radhopnet(in_channels, seed);
    let mut cache = Cache::new(&net);
    let mut opt = RmsProp::new(net.param_count(), cfg.learning_rate, cfg.rho, cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a6_e200);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = vec![0.0f64; net.param_count()];
    let mut best_params = net.params.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        // Fisher-Yates shuffle
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let inv_n = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g = 0.0);
            // the batch loss is a mean of independent per-sample terms, so
            // each sample contributes grad(single) / batch_len; one forward
            // pass per sample feeds its backward pass directly
            for &i in batch.iter() {
                let pred = net.forward(&train[i].input, &mut cache);
                let mut g1 = [0.0f64];
                epoch_loss += loss.batch(&[pred], &[train[i].target], &mut g1);
                net.backward(&mut cache, g1[0] * inv_n, &mut grads);
            }
            seen += batch.len();
            opt.step(&mut net.params, &grads);
        }
        let metric = val_metric(&net, val, &mut cache);
        let selected = metric > best_metric;
        if selected {
            best_metric = metric;
            best_params.copy_from_slice(&net.params);
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / seen as f64,
            val_auroc: metric,
            selected,
        });
    }
    net.params = best_params;
    Ok((net, log))
}

//! Finite-difference verification of the analytic backward pass.
//!
//! The network is piecewise linear in its parameters because of the ReLU
//! gates, so a plain central difference is only a valid derivative oracle
//! while both probe points stay on the same smooth branch. The probes here
//! freeze every ReLU gate to the unperturbed activity pattern, which is
//! precisely the branch the backward pass differentiates; on that branch the
//! composed loss is smooth and the comparison is exact up to truncation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::make_loss;
use super::{Cache, LayerSpec, Network};
use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub op: String,
    pub checks: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

const FD_STEP: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;
const PARAMS_PER_LAYER: usize = 6;
const BATCH: usize = 2;

/// Batch loss with every ReLU gate frozen to the per-sample base pattern.
fn frozen_batch_loss(
    net: &Network,
    cache: &mut Cache,
    loss: &dyn super::loss::ResidueLoss,
    inputs: &[Vec<f64>],
    targets: &[f64],
    masks: &[Vec<Vec<bool>>],
) -> f64 {
    let preds: Vec<f64> = inputs
        .iter()
        .zip(masks)
        .map(|(x, m)| net.forward_masked(x, cache, m))
        .collect();
    let mut scratch = vec![0.0f64; preds.len()];
    loss.batch(&preds, targets, &mut scratch)
}

/// Compare analytic gradients against central finite differences for one
/// seeded random net and batch, per registered loss variant.
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for loss_name in super::loss::known_losses() {
        let loss = make_loss(loss_name, 0.95)?;
        let mut net = Network::radhopnet(60, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c0d);
        let inputs: Vec<Vec<f64>> = (0..BATCH)
            .map(|_| (0..net.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..BATCH).map(|_| rng.gen_range(0.1..0.9)).collect();

        // analytic batch gradient, capturing each sample's gate pattern
        let mut cache = Cache::new(&net);
        let preds: Vec<f64> = inputs.iter().map(|x| net.forward(x, &mut cache)).collect();
        let mut d_pred = vec![0.0f64; BATCH];
        loss.batch(&preds, &targets, &mut d_pred);
        let mut analytic = vec![0.0f64; net.param_count()];
        let mut masks = Vec::with_capacity(BATCH);
        for (x, &d) in inputs.iter().zip(&d_pred) {
            net.forward(x, &mut cache);
            masks.push(net.gate_masks(&cache));
            net.backward(&mut cache, d, &mut analytic);
        }

        let mut layers = Vec::new();
        let mut overall = 0.0f64;
        for (li, layer) in net.layers.clone().iter().enumerate() {
            let count = layer.param_count();
            if count == 0 {
                continue;
            }
            let off = net.offsets[li];
            // probe both ends of the layer plus random interior parameters
            let mut picks: Vec<usize> = vec![off, off + count - 1];
            while picks.len() < PARAMS_PER_LAYER.min(count) {
                let idx = off + rng.gen_range(0..count);
                if !picks.contains(&idx) {
                    picks.push(idx);
                }
            }
            let mut max_rel = 0.0f64;
            for &idx in &picks {
                let orig = net.params[idx];
                net.params[idx] = orig + FD_STEP;
                let plus =
                    frozen_batch_loss(&net, &mut cache, loss.as_ref(), &inputs, &targets, &masks);
                net.params[idx] = orig - FD_STEP;
                let minus =
                    frozen_batch_loss(&net, &mut cache, loss.as_ref(), &inputs, &targets, &masks);
                net.params[idx] = orig;
                let fd = (plus - minus) / (2.0 * FD_STEP);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            overall = overall.max(max_rel);
            layers.push(LayerCheck {
                layer: li,
                op: match *layer {
                    LayerSpec::Conv { .. } => "conv".to_string(),
                    LayerSpec::Fc { .. } => "fc".to_string(),
                    _ => unreachable!("parameter-free layer"),
                },
                checks: picks.len(),
                max_rel_err: max_rel,
            });
        }
        reports.push(GradcheckReport {
            loss: loss_name.to_string(),
            batch_size: BATCH,
            step: FD_STEP,
            tolerance: TOLERANCE,
            layers,
            max_rel_err: overall,
            passed: overall <= TOLERANCE,
        });
    }
    Ok(reports)
}

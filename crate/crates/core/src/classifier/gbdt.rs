//! Histogram-based gradient boosted trees with logistic loss.
//!
//! Second-order boosting: per round, gradients g = p - y and hessians
//! h = p(1 - p) are accumulated into per-feature histograms; splits maximize
//! the usual gain G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)
//! and leaves take -lr * G/(H+lambda). Probability is the sigmoid of the
//! base score plus the summed leaf values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, ClassifierConfig, VoxelModel};
use crate::error::{PipelineError, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub min_leaf: usize,
    pub lambda: f64,
    pub n_bins: usize,
    /// fraction of features scanned per tree
    pub colsample: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            rounds: 200,
            depth: 3,
            learning_rate: 0.1,
            subsample: 0.8,
            min_leaf: 20,
            lambda: 1.0,
            n_bins: 64,
            colsample: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: u32,
    pub threshold: f64,
    /// training-time histogram bin of the split (bins <= split_bin go left)
    pub split_bin: u32,
    /// child indices into the node array; -1 marks a leaf
    pub left: i32,
    pub right: i32,
    pub value: f64,
}

impl TreeNode {
    fn leaf(value: f64) -> Self {
        TreeNode {
            feature: 0,
            threshold: 0.0,
            split_bin: 0,
            left: -1,
            right: -1,
            value,
        }
    }

    fn is_leaf(&self) -> bool {
        self.left < 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtModel {
    pub kind: String,
    pub base_score: f64,
    pub trees: Vec<Vec<TreeNode>>,
    pub config: GbdtConfig,
}

impl VoxelModel for GbdtModel {
    fn kind(&self) -> &'static str {
        "gbdt"
    }

    fn predict_prob(&self, features: &[f32]) -> f64 {
        let mut score = self.base_score;
        for tree in &self.trees {
            let mut idx = 0usize;
            loop {
                let node = &tree[idx];
                if node.is_leaf() {
                    score += node.value;
                    break;
                }
                idx = if (features[node.feature as usize] as f64) < node.threshold {
                    node.left as usize
                } else {
                    node.right as usize
                };
            }
        }
        sigmoid(score)
    }

    fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("gbdt model serializes")
    }
}

pub(super) fn train(
    features: &FeatureMatrix,
    labels: &[u8],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Box<dyn VoxelModel>> {
    let model = train_gbdt(features, labels, &cfg.gbdt, seed)?;
    Ok(Box::new(model))
}

pub(super) fn load(value: &serde_json::Value) -> Result<Box<dyn VoxelModel>> {
    let model: GbdtModel = serde_json::from_value(value.clone())
        .map_err(|e| PipelineError::InvalidInput(format!("bad gbdt model JSON: {e}")))?;
    Ok(Box::new(model))
}

/// Column-major binned view of the training matrix.
struct BinnedMatrix {
    n_bins: usize,
    /// per feature: (min, bin width); width 0 marks a constant feature
    edges: Vec<(f64, f64)>,
    /// per feature, per row: bin index
    bins: Vec<Vec<u8>>,
}

impl BinnedMatrix {
    fn build(m: &FeatureMatrix, n_bins: usize) -> Self {
        assert!(n_bins <= 256);
        let mut edges = Vec::with_capacity(m.cols);
        let mut bins = vec![vec![0u8; m.rows]; m.cols];
        let mut lo = vec![f64::INFINITY; m.cols];
        let mut hi = vec![f64::NEG_INFINITY; m.cols];
        for r in 0..m.rows {
            for (c, &v) in m.row(r).iter().enumerate() {
                let v = v as f64;
                if v < lo[c] {
                    lo[c] = v;
                }
                if v > hi[c] {
                    hi[c] = v;
                }
            }
        }
        for c in 0..m.cols {
            let width = (hi[c] - lo[c]) / n_bins as f64;
            edges.push((lo[c], width));
        }
        for r in 0..m.rows {
            let row = m.row(r);
            for c in 0..m.cols {
                let (min, width) = edges[c];
                let b = if width <= 0.0 {
                    0
                } else {
                    (((row[c] as f64 - min) / width) as usize).min(n_bins - 1)
                };
                bins[c][r] = b as u8;
            }
        }
        BinnedMatrix {
            n_bins,
            edges,
            bins,
        }
    }

    /// real-valued threshold at the upper edge of `bin`
    fn threshold(&self, feature: usize, bin: usize) -> f64 {
        let (min, width) = self.edges[feature];
        min + (bin + 1) as f64 * width
    }
}

pub fn train_gbdt(
    features: &FeatureMatrix,
    labels: &[u8],
    cfg: &GbdtConfig,
    seed: u64,
) -> Result<GbdtModel> {
    let n = features.rows;
    let base_rate = (labels.iter().map(|&l| l as f64).sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (base_rate / (1.0 - base_rate)).ln();
    let binned = BinnedMatrix::build(features, cfg.n_bins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score = vec![base_score; n];
    let mut trees = Vec::with_capacity(cfg.rounds);
    let n_sub = ((cfg.subsample * n as f64).floor() as usize).clamp(1, n);
    let n_feats = ((cfg.colsample * features.cols as f64).ceil() as usize).clamp(1, features.cols);

    let mut g = vec![0.0f64; n];
    let mut h = vec![0.0f64; n];
    for _round in 0..cfg.rounds {
        for i in 0..n {
            let p = sigmoid(score[i]);
            g[i] = p - labels[i] as f64;
            h[i] = (p * (1.0 - p)).max(1e-16);
        }
        let rows = sample_distinct(&mut rng, n, n_sub);
        let feats = sample_distinct(&mut rng, features.cols, n_feats);
        let mut nodes = Vec::new();
        grow_node(&binned, &g, &h, rows, &feats, cfg, cfg.depth, &mut nodes);
        // update all training scores with the new tree
        for i in 0..n {
            let mut idx = 0usize;
            loop {
                let node = &nodes[idx];
                if node.is_leaf() {
                    score[i] += node.value;
                    break;
                }
                let b = binned.bins[node.feature as usize][i] as usize;
                idx = if b <= node.split_bin as usize {
                    node.left as usize
                } else {
                    node.right as usize
                };
            }
        }
        trees.push(nodes);
    }
    Ok(GbdtModel {
        kind: "gbdt".to_string(),
        base_score,
        trees,
        config: cfg.clone(),
    })
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Grow one node; returns its index in `nodes`.
fn grow_node(
    binned: &BinnedMatrix,
    g: &[f64],
    h: &[f64],
    rows: Vec<usize>,
    feats: &[usize],
    cfg: &GbdtConfig,
    depth_left: usize,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let g_sum: f64 = rows.iter().map(|&i| g[i]).sum();
    let h_sum: f64 = rows.iter().map(|&i| h[i]).sum();
    let leaf_value = -cfg.learning_rate * g_sum / (h_sum + cfg.lambda);
    if depth_left == 0 || rows.len() < 2 * cfg.min_leaf {
        let idx = nodes.len();
        nodes.push(TreeNode::leaf(leaf_value));
        return idx;
    }

    let parent_obj = g_sum * g_sum / (h_sum + cfg.lambda);
    let mut best: Option<(f64, usize, usize)> = None; // (gain, feature, split_bin)
    let mut hist_g = vec![0.0f64; binned.n_bins];
    let mut hist_h = vec![0.0f64; binned.n_bins];
    let mut hist_c = vec![0usize; binned.n_bins];
    for &f in feats {
        let col = &binned.bins[f];
        hist_g.iter_mut().for_each(|x| *x = 0.0);
        hist_h.iter_mut().for_each(|x| *x = 0.0);
        hist_c.iter_mut().for_each(|x| *x = 0);
        for &i in &rows {
            let b = col[i] as usize;
            hist_g[b] += g[i];
            hist_h[b] += h[i];
            hist_c[b] += 1;
        }
        let mut gl = 0.0;
        let mut hl = 0.0;
        let mut cl = 0usize;
        for b in 0..binned.n_bins - 1 {
            gl += hist_g[b];
            hl += hist_h[b];
            cl += hist_c[b];
            let cr = rows.len() - cl;
            if cl < cfg.min_leaf || cr < cfg.min_leaf {
                continue;
            }
            let gr = g_sum - gl;
            let hr = h_sum - hl;
            let gain = gl * gl / (hl + cfg.lambda) + gr * gr / (hr + cfg.lambda) - parent_obj;
            // strict comparison: ties keep the earliest (feature, bin)
            if gain > 1e-12 && best.map_or(true, |(bg, _, _)| gain > bg) {
                best = Some((gain, f, b));
            }
        }
    }

    let Some((_, feature, split_bin)) = best else {
        let idx = nodes.len();
        nodes.push(TreeNode::leaf(leaf_value));
        return idx;
    };

    let col = &binned.bins[feature];
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&i| (col[i] as usize) <= split_bin);
    let idx = nodes.len();
    nodes.push(TreeNode {
        feature: feature as u32,
        threshold: binned.threshold(feature, split_bin),
        split_bin: split_bin as u32,
        left: 0,
        right: 0,
        value: 0.0,
    });
    let left = grow_node(binned, g, h, left_rows, feats, cfg, depth_left - 1, nodes);
    let right = grow_node(binned, g, h, right_rows, feats, cfg, depth_left - 1, nodes);
    nodes[idx].left = left as i32;
    nodes[idx].right = right as i32;
    idx
}

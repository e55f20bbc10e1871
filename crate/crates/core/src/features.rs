//! Supervised feature machinery: the discriminant feature test (per-feature
//! best-threshold weighted entropy), top-k selection, and the linear
//! normal transform (ridge regression over random feature subsets).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// Row-major f32 feature matrix. Values are stored single-precision to keep
/// desk-scale training sets in memory; all model math runs in f64.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn binary_entropy_bits(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

/// Score one feature column against binary labels: the minimum, over
/// `n_bins - 1` uniform thresholds between the column min and max, of the
/// sample-weighted mean binary entropy of the two sides. Lower is more
/// discriminant. A constant column scores the entropy of the full label set.
pub fn dft_score(column: &[f64], labels: &[u8], n_bins: usize) -> Result<f64> {
    assert_eq!(column.len(), labels.len());
    if column.len() < 2 {
        return Err(PipelineError::InvalidInput("dft_score needs >= 2 samples".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(PipelineError::InvalidInput("dft_score needs both classes".into()));
    }
    let n = column.len();
    let full_entropy = binary_entropy_bits(n_pos as f64 / n as f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in column {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi - lo < 1e-12 {
        return Ok(full_entropy);
    }

    // histogram of (total, positive) counts; threshold k splits bins [0,k) | [k,n_bins)
    let scale = n_bins as f64 / (hi - lo);
    let mut total = vec![0usize; n_bins];
    let mut pos = vec![0usize; n_bins];
    for (&x, &l) in column.iter().zip(labels) {
        let b = (((x - lo) * scale) as usize).min(n_bins - 1);
        total[b] += 1;
        if l > 0 {
            pos[b] += 1;
        }
    }
    let mut best = full_entropy;
    let mut left_n = 0usize;
    let mut left_p = 0usize;
    for k in 1..n_bins {
        left_n += total[k - 1];
        left_p += pos[k - 1];
        let right_n = n - left_n;
        let right_p = n_pos - left_p;
        let mut score = 0.0;
        if left_n > 0 {
            score += left_n as f64 / n as f64 * binary_entropy_bits(left_p as f64 / left_n as f64);
        }
        if right_n > 0 {
            score += right_n as f64 / n as f64 * binary_entropy_bits(right_p as f64 / right_n as f64);
        }
        if score < best {
            best = score;
        }
    }
    Ok(best)
}

/// The kept feature subset of one modality: scores for every raw feature and
/// the indices of the `k` most discriminant ones (lowest score; ties break
/// toward the lower index), sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelector {
    pub scores: Vec<f64>,
    pub kept_indices: Vec<u32>,
}

impl FeatureSelector {
    pub fn n_kept(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn select_f64(&self, raw: &[f64]) -> Vec<f64> {
        self.kept_indices.iter().map(|&i| raw[i as usize]).collect()
    }

    pub fn select_into_f32(&self, raw: &[f64], out: &mut [f32]) {
        for (o, &i) in out.iter_mut().zip(&self.kept_indices) {
            *o = raw[i as usize] as f32;
        }
    }
}

pub fn select_top_k(scores: &[f64], k: usize) -> Result<FeatureSelector> {
    if scores.len() < k {
        return Err(PipelineError::FitInfeasible(format!(
            "cannot select {k} features from {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<u32> = order[..k].iter().map(|&i| i as u32).collect();
    kept.sort_unstable();
    Ok(FeatureSelector {
        scores: scores.to_vec(),
        kept_indices: kept,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LntConfig {
    pub n_out: usize,
    pub subset: usize,
    pub lambda: f64,
    /// row subsample cap for the normal-equation fit
    pub max_fit_rows: usize,
}

impl Default for LntConfig {
    fn default() -> Self {
        LntConfig {
            n_out: 20,
            subset: 200,
            lambda: 1e-6,
            max_fit_rows: 10_000,
        }
    }
}

/// Linear normal transform: each output is an affine ridge regression of the
/// labels over a seeded random subset of input features.
#[derive(Debug, Clone, PartialEq)]
pub struct LntProjector {
    pub in_dim: usize,
    /// per output: subset indices into the input features
    pub subsets: Vec<Vec<u32>>,
    /// per output: one weight per subset index
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub lambda: f64,
    pub seed: u64,
}

impl LntProjector {
    pub fn n_out(&self) -> usize {
        self.subsets.len()
    }
}

/// Partial Fisher-Yates: `k` distinct indices from `0..n`.
fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

pub fn fit_lnt(x: &FeatureMatrix, labels: &[f64], cfg: &LntConfig, seed: u64) -> Result<LntProjector> {
    assert_eq!(x.rows, labels.len());
    if x.rows <= cfg.subset {
        return Err(PipelineError::InvalidInput(format!(
            "fit_lnt needs more rows ({}) than the subset size ({})",
            x.rows, cfg.subset
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit_rows: Vec<usize> = if x.rows > cfg.max_fit_rows {
        sample_distinct(&mut rng, x.rows, cfg.max_fit_rows)
            .into_iter()
            .map(|i| i as usize)
            .collect()
    } else {
        (0..x.rows).collect()
    };

    let m = cfg.subset + 1; // + intercept column
    let mut subsets = Vec::with_capacity(cfg.n_out);
    let mut weights = Vec::with_capacity(cfg.n_out);
    let mut intercepts = Vec::with_capacity(cfg.n_out);
    let mut xi = vec![0.0f64; m];
    for _ in 0..cfg.n_out {
        let subset = sample_distinct(&mut rng, x.cols, cfg.subset);
        let mut ata = DMatrix::<f64>::zeros(m, m);
        let mut atb = DVector::<f64>::zeros(m);
        for &r in &fit_rows {
            let row = x.row(r);
            for (dst, &ci) in xi.iter_mut().zip(&subset) {
                *dst = row[ci as usize] as f64;
            }
            xi[m - 1] = 1.0;
            let y = labels[r];
            for a in 0..m {
                let xa = xi[a];
                atb[a] += xa * y;
                for b in a..m {
                    ata[(a, b)] += xa * xi[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                ata[(a, b)] = ata[(b, a)];
            }
        }
        // ridge on the feature weights only, intercept unpenalized
        for a in 0..m - 1 {
            ata[(a, a)] += cfg.lambda;
        }
        let sol = ata
            .clone()
            .cholesky()
            .map(|c| c.solve(&atb))
            .or_else(|| ata.lu().solve(&atb))
            .ok_or_else(|| PipelineError::FitInfeasible("LNT normal equations are singular".into()))?;
        weights.push(sol.as_slice()[..m - 1].to_vec());
        intercepts.push(sol[m - 1]);
        subsets.push(subset);
    }
    Ok(LntProjector {
        in_dim: x.cols,
        subsets,
        weights,
        intercepts,
        lambda: cfg.lambda,
        seed,
    })
}

pub fn apply_lnt(p: &LntProjector, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != p.in_dim {
        return Err(PipelineError::DimsMismatch(format!(
            "LNT expects {} features, got {}",
            p.in_dim,
            features.len()
        )));
    }
    Ok(apply_lnt_unchecked(p, features))
}

#[inline]
pub fn apply_lnt_unchecked(p: &LntProjector, features: &[f64]) -> Vec<f64> {
    p.subsets
        .iter()
        .zip(&p.weights)
        .zip(&p.intercepts)
        .map(|((subset, w), &b)| {
            let mut s = b;
            for (&ci, &wi) in subset.iter().zip(w) {
                s += features[ci as usize] * wi;
            }
            s
        })
        .collect()
}

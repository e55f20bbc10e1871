//! The two-hop Saab cascade over 24x24 in-plane windows.
//!
//! Hop 1 applies a Saab transform to the sixteen non-overlapping 6x6 blocks
//! of the window. Hop 2 applies a per-channel Saab transform to the 2x2
//! non-overlapping blocks of each channel's 4x4 response grid. The emitted
//! feature vector is the concatenation of all hop-1 and hop-2 responses in a
//! fixed order:
//!
//! * hop 1: block position (row-major, 16 of them) outer, channel inner;
//! * hop 2: hop-1 channel outer, block position (row-major, 4) middle,
//!   hop-2 channel inner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::case::Case;
use crate::error::{PipelineError, Result};
use crate::saab::{apply_saab_into, fit_saab, SaabKernelSet};

pub const WINDOW: usize = 24;
const HOP1_BLOCK: usize = 6;
const HOP1_GRID: usize = WINDOW / HOP1_BLOCK; // 4
const HOP1_DIM: usize = HOP1_BLOCK * HOP1_BLOCK; // 36
const HOP2_BLOCK: usize = 2;
const HOP2_GRID: usize = HOP1_GRID / HOP2_BLOCK; // 2
const HOP2_DIM: usize = HOP2_BLOCK * HOP2_BLOCK; // 4

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RadHopConfig {
    /// in-plane window size, 24
    pub window: usize,
    /// cumulative-energy keep fraction for channel truncation
    pub energy_threshold: f64,
    /// training windows sampled per case
    pub windows_per_case: usize,
    /// required minimum raw feature count
    pub min_features: usize,
}

impl Default for RadHopConfig {
    fn default() -> Self {
        RadHopConfig {
            window: WINDOW,
            energy_threshold: 1.0,
            windows_per_case: 150,
            min_features: 800,
        }
    }
}

/// A fitted two-hop cascade for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RadHopModel {
    pub window: usize,
    pub energy_threshold: f64,
    pub hop1: SaabKernelSet,
    /// one kernel set per kept hop-1 channel
    pub hop2: Vec<SaabKernelSet>,
    pub f_raw: usize,
}

impl RadHopModel {
    pub fn hop1_channels(&self) -> usize {
        self.hop1.num_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.f_raw
    }

    fn compute_f_raw(hop1: &SaabKernelSet, hop2: &[SaabKernelSet]) -> usize {
        let c1 = hop1.num_channels();
        let hop2_sum: usize = hop2.iter().map(|k| k.num_channels()).sum();
        HOP1_GRID * HOP1_GRID * c1 + HOP2_GRID * HOP2_GRID * hop2_sum
    }
}

/// Copy a size x size in-plane window centered at (cy, cx) out of a
/// ny x nx plane, replicating edge voxels where the window overlaps the
/// border. The window spans rows [cy - size/2, cy + size/2).
pub fn extract_window(plane: &[f64], ny: usize, nx: usize, cy: i64, cx: i64, size: usize) -> Vec<f64> {
    let half = (size / 2) as i64;
    let mut out = Vec::with_capacity(size * size);
    for dy in -half..(size as i64 - half) {
        let y = (cy + dy).clamp(0, ny as i64 - 1) as usize;
        for dx in -half..(size as i64 - half) {
            let x = (cx + dx).clamp(0, nx as i64 - 1) as usize;
            out.push(plane[y * nx + x]);
        }
    }
    out
}

/// Sample training windows and fit the cascade for one modality.
///
/// Window centers are drawn uniformly per case (inside the gland mask when
/// one is present). Deterministic given `seed` and the training cases.
pub fn fit_radhop(
    cases: &[Case],
    modality_idx: usize,
    cfg: &RadHopConfig,
    seed: u64,
) -> Result<RadHopModel> {
    if cases.is_empty() {
        return Err(PipelineError::InvalidInput("fit_radhop needs at least one case".into()));
    }
    assert_eq!(cfg.window, WINDOW, "only the 24x24 window layout is supported");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows: Vec<Vec<f64>> = Vec::new();
    for case in cases {
        let vol = &case.volumes[modality_idx];
        let (nz, ny, nx) = vol.dims;
        for _ in 0..cfg.windows_per_case {
            let (mut z, mut y, mut x);
            let mut attempts = 0;
            loop {
                z = rng.gen_range(0..nz);
                y = rng.gen_range(0..ny);
                x = rng.gen_range(0..nx);
                attempts += 1;
                match &case.gland_mask {
                    Some(m) if m.at(z, y, x) == 0 && attempts < 200 => continue,
                    _ => break,
                }
            }
            windows.push(extract_window(vol.slice(z), ny, nx, y as i64, x as i64, WINDOW));
        }
    }
    fit_radhop_from_windows(&windows, cfg)
}

/// Fit the cascade directly from pre-extracted 24x24 windows.
pub fn fit_radhop_from_windows(windows: &[Vec<f64>], cfg: &RadHopConfig) -> Result<RadHopModel> {
    let n_blocks = HOP1_GRID * HOP1_GRID;
    let mut blocks = Vec::with_capacity(windows.len() * n_blocks * HOP1_DIM);
    for w in windows {
        for pos in 0..n_blocks {
            push_hop1_block(w, pos, &mut blocks);
        }
    }
    let hop1 = fit_saab(&blocks, HOP1_DIM, HOP1_DIM - 1)?.truncate_to_energy(cfg.energy_threshold);
    let c1 = hop1.num_channels();

    // hop-1 responses per window: grid[channel][4x4]
    let mut grids: Vec<Vec<f64>> = Vec::with_capacity(windows.len());
    let mut coeffs = Vec::with_capacity(c1);
    let mut block = Vec::with_capacity(HOP1_DIM);
    for w in windows {
        let mut grid = vec![0.0f64; c1 * n_blocks];
        for pos in 0..n_blocks {
            block.clear();
            push_hop1_block(w, pos, &mut block);
            coeffs.clear();
            apply_saab_into(&hop1, &block, &mut coeffs);
            for (ch, &v) in coeffs.iter().enumerate() {
                grid[ch * n_blocks + pos] = v;
            }
        }
        grids.push(grid);
    }

    let mut hop2 = Vec::with_capacity(c1);
    for ch in 0..c1 {
        let mut sub_blocks = Vec::with_capacity(grids.len() * HOP2_GRID * HOP2_GRID * HOP2_DIM);
        for grid in &grids {
            let g = &grid[ch * n_blocks..(ch + 1) * n_blocks];
            for by in 0..HOP2_GRID {
                for bx in 0..HOP2_GRID {
                    push_hop2_block(g, by, bx, &mut sub_blocks);
                }
            }
        }
        let k = fit_saab(&sub_blocks, HOP2_DIM, HOP2_DIM - 1)?.truncate_to_energy(cfg.energy_threshold);
        hop2.push(k);
    }

    let f_raw = RadHopModel::compute_f_raw(&hop1, &hop2);
    if f_raw < cfg.min_features {
        return Err(PipelineError::FitInfeasible(format!(
            "raw feature dim {} < required {}; raise energy_threshold (currently {}) or provide richer training windows",
            f_raw, cfg.min_features, cfg.energy_threshold
        )));
    }
    Ok(RadHopModel {
        window: cfg.window,
        energy_threshold: cfg.energy_threshold,
        hop1,
        hop2,
        f_raw,
    })
}

#[inline]
fn push_hop1_block(window: &[f64], pos: usize, out: &mut Vec<f64>) {
    let by = pos / HOP1_GRID;
    let bx = pos % HOP1_GRID;
    for r in 0..HOP1_BLOCK {
        let row = (by * HOP1_BLOCK + r) * WINDOW + bx * HOP1_BLOCK;
        out.extend_from_slice(&window[row..row + HOP1_BLOCK]);
    }
}

#[inline]
fn push_hop2_block(grid: &[f64], by: usize, bx: usize, out: &mut Vec<f64>) {
    // grid is the 4x4 response map of one channel, row-major
    let r = by * HOP2_BLOCK;
    let c = bx * HOP2_BLOCK;
    out.push(grid[r * HOP1_GRID + c]);
    out.push(grid[r * HOP1_GRID + c + 1]);
    out.push(grid[(r + 1) * HOP1_GRID + c]);
    out.push(grid[(r + 1) * HOP1_GRID + c + 1]);
}

/// Feature vector of one materialized 24x24 window.
pub fn features_from_window(model: &RadHopModel, window: &[f64]) -> Vec<f64> {
    debug_assert_eq!(window.len(), WINDOW * WINDOW);
    let n_blocks = HOP1_GRID * HOP1_GRID;
    let c1 = model.hop1_channels();
    let mut features = Vec::with_capacity(model.f_raw);
    let mut grid = vec![0.0f64; c1 * n_blocks];
    let mut block = Vec::with_capacity(HOP1_DIM);
    let mut coeffs = Vec::with_capacity(c1);
    for pos in 0..n_blocks {
        block.clear();
        push_hop1_block(window, pos, &mut block);
        coeffs.clear();
        apply_saab_into(&model.hop1, &block, &mut coeffs);
        features.extend_from_slice(&coeffs);
        for (ch, &v) in coeffs.iter().enumerate() {
            grid[ch * n_blocks + pos] = v;
        }
    }
    let mut sub = Vec::with_capacity(HOP2_DIM);
    for ch in 0..c1 {
        let g = &grid[ch * n_blocks..(ch + 1) * n_blocks];
        for by in 0..HOP2_GRID {
            for bx in 0..HOP2_GRID {
                sub.clear();
                push_hop2_block(g, by, bx, &mut sub);
                apply_saab_into(&model.hop2[ch], &sub, &mut features);
            }
        }
    }
    features
}

/// Feature vector for the window centered at (cy, cx) on one z-slice,
/// edge-replicated at the image border.
pub fn extract_window_features(
    model: &RadHopModel,
    plane: &[f64],
    ny: usize,
    nx: usize,
    cy: i64,
    cx: i64,
) -> Vec<f64> {
    let window = extract_window(plane, ny, nx, cy, cx, model.window);
    features_from_window(model, &window)
}

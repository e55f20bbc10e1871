//! Resampling to a target voxel spacing and percentile intensity normalization.

use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::error::Result;
use crate::volume::{voxel_count, MaskVolume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing_mm: (f64, f64, f64),
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: (3.0, 0.25, 0.25),
            lo_percentile: 0.05,
            hi_percentile: 99.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (sz, sy, sx) = self.target_spacing_mm;
        if !(sz > 0.0 && sy > 0.0 && sx > 0.0) {
            return Err(crate::error::PipelineError::InvalidInput(format!(
                "target spacing must be positive, got {:?}",
                self.target_spacing_mm
            )));
        }
        if !(0.0 <= self.lo_percentile && self.lo_percentile < self.hi_percentile
            && self.hi_percentile <= 100.0)
        {
            return Err(crate::error::PipelineError::InvalidInput(format!(
                "percentiles must satisfy 0 <= lo < hi <= 100, got {} / {}",
                self.lo_percentile, self.hi_percentile
            )));
        }
        Ok(())
    }
}

fn output_dims(dims: (usize, usize, usize), spacing: (f64, f64, f64), target: (f64, f64, f64)) -> (usize, usize, usize) {
    let d = |n: usize, s: f64, t: f64| ((n as f64 * s / t).round() as usize).max(1);
    (
        d(dims.0, spacing.0, target.0),
        d(dims.1, spacing.1, target.1),
        d(dims.2, spacing.2, target.2),
    )
}

/// Trilinear resampling at physical coordinates. Output voxel i along an axis
/// samples the source at `i * target / spacing`; out-of-range sample points
/// clamp to the boundary voxel. Matching target spacing reproduces the input
/// exactly (the index mapping is the identity).
pub fn resample_trilinear(v: &Volume, target_spacing_mm: (f64, f64, f64)) -> Result<Volume> {
    v.validate()?;
    let (nz, ny, nx) = v.dims;
    let out_dims = output_dims(v.dims, v.spacing_mm, target_spacing_mm);
    let (oz, oy, ox) = out_dims;
    let scale = (
        target_spacing_mm.0 / v.spacing_mm.0,
        target_spacing_mm.1 / v.spacing_mm.1,
        target_spacing_mm.2 / v.spacing_mm.2,
    );
    let mut values = Vec::with_capacity(voxel_count(out_dims));
    for z in 0..oz {
        let (z0, z1, fz) = axis_coords(z as f64 * scale.0, nz);
        for y in 0..oy {
            let (y0, y1, fy) = axis_coords(y as f64 * scale.1, ny);
            for x in 0..ox {
                let (x0, x1, fx) = axis_coords(x as f64 * scale.2, nx);
                let c = |zz: usize, yy: usize, xx: usize| v.at(zz, yy, xx);
                let v00 = c(z0, y0, x0) * (1.0 - fx) + c(z0, y0, x1) * fx;
                let v01 = c(z0, y1, x0) * (1.0 - fx) + c(z0, y1, x1) * fx;
                let v10 = c(z1, y0, x0) * (1.0 - fx) + c(z1, y0, x1) * fx;
                let v11 = c(z1, y1, x0) * (1.0 - fx) + c(z1, y1, x1) * fx;
                let v0 = v00 * (1.0 - fy) + v01 * fy;
                let v1 = v10 * (1.0 - fy) + v11 * fy;
                values.push(v0 * (1.0 - fz) + v1 * fz);
            }
        }
    }
    Volume::new(out_dims, target_spacing_mm, values, v.modality.clone())
}

/// Source interpolation coordinates along one axis, clamped to the grid.
/// Returns (floor index, ceil index, fractional weight). A fractional part of
/// exactly 0 yields weight 0, so integer sample points are reproduced bitwise.
#[inline]
fn axis_coords(pos: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

/// Nearest-neighbor resampling for categorical label masks.
pub fn resample_mask_nearest(m: &MaskVolume, target_spacing_mm: (f64, f64, f64)) -> MaskVolume {
    let (nz, ny, nx) = m.dims;
    let out_dims = output_dims(m.dims, m.spacing_mm, target_spacing_mm);
    let (oz, oy, ox) = out_dims;
    let scale = (
        target_spacing_mm.0 / m.spacing_mm.0,
        target_spacing_mm.1 / m.spacing_mm.1,
        target_spacing_mm.2 / m.spacing_mm.2,
    );
    let near = |pos: f64, n: usize| (pos.round().clamp(0.0, (n - 1) as f64)) as usize;
    let mut values = Vec::with_capacity(voxel_count(out_dims));
    for z in 0..oz {
        let sz = near(z as f64 * scale.0, nz);
        for y in 0..oy {
            let sy = near(y as f64 * scale.1, ny);
            for x in 0..ox {
                let sx = near(x as f64 * scale.2, nx);
                values.push(m.at(sz, sy, sx));
            }
        }
    }
    MaskVolume {
        dims: out_dims,
        spacing_mm: target_spacing_mm,
        values,
    }
}

/// Linear-interpolated order statistic: index p/100 * (n-1) into the sorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = pos - i0 as f64;
    sorted[i0] * (1.0 - f) + sorted[i1] * f
}

/// Map intensities to [0,1] via `clamp((x - a) / (b - a), 0, 1)` with a and b
/// the configured low/high percentiles. A flat volume (b - a below 1e-12)
/// maps to all zeros.
pub fn normalize_percentile(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    v.validate()?;
    cfg.validate()?;
    let mut sorted = v.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let a = percentile_sorted(&sorted, cfg.lo_percentile);
    let b = percentile_sorted(&sorted, cfg.hi_percentile);
    let values = if b - a < 1e-12 {
        vec![0.0; v.values.len()]
    } else {
        let inv = 1.0 / (b - a);
        v.values
            .iter()
            .map(|&x| ((x - a) * inv).clamp(0.0, 1.0))
            .collect()
    };
    Volume::new(v.dims, v.spacing_mm, values, v.modality.clone())
}

/// Resample all grids of a case to the target spacing and normalize each
/// modality. Label masks are resampled nearest-neighbor.
pub fn preprocess_case(case: &Case, cfg: &PreprocessConfig) -> Result<Case> {
    let target = cfg.target_spacing_mm;
    let volumes = [
        normalize_percentile(&resample_trilinear(&case.volumes[0], target)?, cfg)?,
        normalize_percentile(&resample_trilinear(&case.volumes[1], target)?, cfg)?,
        normalize_percentile(&resample_trilinear(&case.volumes[2], target)?, cfg)?,
    ];
    let lesion_mask = case
        .lesion_mask
        .as_ref()
        .map(|m| resample_mask_nearest(m, target));
    let gland_mask = case
        .gland_mask
        .as_ref()
        .map(|m| resample_mask_nearest(m, target));
    Case::new(case.case_id.clone(), volumes, lesion_mask, gland_mask)
}

//! Stage-2 inputs: each candidate ROI is described by a 13 x 13 grid of
//! 24 x 24 windows tiling a 72 x 72 in-plane receptive field around the ROI
//! centroid; every window contributes the per-modality linear (LNT)
//! projections of its selected radiomics features. Training-time augmentation
//! operates in image space on a 96 x 96 context window so rotated and shifted
//! receptive fields never sample outside known pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::features::{apply_lnt_unchecked, FeatureSelector, LntProjector};
use crate::radhop::{extract_window, extract_window_features, RadHopModel};

/// receptive-field side length in voxels
pub const RF_SIZE: usize = 72;
/// augmentation context side length; leaves a 12-voxel margin on each side
pub const CONTEXT_SIZE: usize = 96;
/// margin between the context window and the receptive field
pub const CONTEXT_MARGIN: usize = (CONTEXT_SIZE - RF_SIZE) / 2;
/// windows per receptive-field axis
pub const GRID: usize = 13;
/// in-plane stride between adjacent window centers
pub const GRID_STRIDE: usize = 4;

/// Feature grid of one ROI, layout `[y][x][channel]` with channels ordered
/// `[t2w | adc | dwi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPatchTensor {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RoiPatchTensor {
    pub fn zeros(grid: usize, channels: usize) -> Self {
        RoiPatchTensor {
            grid,
            channels,
            data: vec![0.0; grid * grid * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.grid + x) * self.channels + c]
    }
}

/// One image-space augmentation of the receptive field. The identity
/// augmentation reproduces the plain crop bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// in-plane rotation in degrees
    pub theta_deg: f64,
    /// integer (dy, dx) translation in voxels
    pub shift: (i64, i64),
    /// horizontal mirror
    pub flip: bool,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            theta_deg: 0.0,
            shift: (0, 0),
            flip: false,
        }
    }
}

/// Draw `count` augmentations; the first is always the identity so the
/// un-augmented ROI stays in the training pool.
pub fn sample_augmentations(seed: u64, count: usize) -> Vec<Augmentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i == 0 {
            out.push(Augmentation::identity());
        } else {
            out.push(Augmentation {
                theta_deg: rng.gen_range(-180.0..180.0),
                shift: (rng.gen_range(-2..=2), rng.gen_range(-2..=2)),
                flip: rng.gen_bool(0.5),
            });
        }
    }
    out
}

/// Edge-replicated 96 x 96 context crop centered on the ROI centroid.
pub fn extract_context(plane: &[f64], ny: usize, nx: usize, cy: i64, cx: i64) -> Vec<f64> {
    extract_window(plane, ny, nx, cy, cx, CONTEXT_SIZE)
}

#[inline]
fn bilinear_clamped(context: &[f64], u: f64, v: f64) -> f64 {
    let max = (CONTEXT_SIZE - 1) as f64;
    let u = u.clamp(0.0, max);
    let v = v.clamp(0.0, max);
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(CONTEXT_SIZE - 1);
    let v1 = (v0 + 1).min(CONTEXT_SIZE - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let a = context[u0 * CONTEXT_SIZE + v0] * (1.0 - fv) + context[u0 * CONTEXT_SIZE + v1] * fv;
    let b = context[u1 * CONTEXT_SIZE + v0] * (1.0 - fv) + context[u1 * CONTEXT_SIZE + v1] * fv;
    a * (1.0 - fu) + b * fu
}

/// Resample the 72 x 72 receptive field out of a 96 x 96 context. Each output
/// pixel is pulled through the inverse map crop -> rotation -> shift -> flip;
/// a zero rotation keeps integer sampling coordinates, so identity, pure
/// shifts, and flips are exact copies rather than interpolations.
pub fn region_from_context(context: &[f64], aug: &Augmentation) -> Vec<f64> {
    assert_eq!(context.len(), CONTEXT_SIZE * CONTEXT_SIZE);
    let mut out = Vec::with_capacity(RF_SIZE * RF_SIZE);
    let center = (CONTEXT_SIZE as f64 - 1.0) / 2.0;
    let theta = aug.theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    for y in 0..RF_SIZE {
        for x in 0..RF_SIZE {
            let xf = if aug.flip { RF_SIZE - 1 - x } else { x };
            let u0 = (y + CONTEXT_MARGIN) as f64;
            let v0 = (xf + CONTEXT_MARGIN) as f64;
            let value = if theta == 0.0 {
                let u = (u0 as i64 + aug.shift.0).clamp(0, CONTEXT_SIZE as i64 - 1) as usize;
                let v = (v0 as i64 + aug.shift.1).clamp(0, CONTEXT_SIZE as i64 - 1) as usize;
                context[u * CONTEXT_SIZE + v]
            } else {
                // inverse rotation about the context center
                let du = u0 - center;
                let dv = v0 - center;
                let u = center + cos * du - sin * dv + aug.shift.0 as f64;
                let v = center + sin * du + cos * dv + aug.shift.1 as f64;
                bilinear_clamped(context, u, v)
            };
            out.push(value);
        }
    }
    out
}

/// Per-modality frozen stage-1 feature machinery reused by stage 2.
pub struct FeatureStack<'a> {
    pub models: &'a [RadHopModel; 3],
    pub selectors: &'a [FeatureSelector; 3],
    pub lnts: &'a [LntProjector; 3],
}

impl FeatureStack<'_> {
    pub fn channels(&self) -> usize {
        self.lnts.iter().map(|l| l.intercepts.len()).sum()
    }
}

/// Build the 13 x 13 x C tensor from one 72 x 72 region per modality.
/// Grid node (i, j) reads the 24 x 24 window centered at
/// `(CONTEXT_MARGIN + GRID_STRIDE * i, CONTEXT_MARGIN + GRID_STRIDE * j)`
/// in region coordinates; the windows tile the region exactly.
pub fn roi_patch_from_regions(stack: &FeatureStack, regions: &[Vec<f64>; 3]) -> RoiPatchTensor {
    let channels = stack.channels();
    let mut tensor = RoiPatchTensor::zeros(GRID, channels);
    for i in 0..GRID {
        let wy = (CONTEXT_MARGIN + GRID_STRIDE * i) as i64;
        for j in 0..GRID {
            let wx = (CONTEXT_MARGIN + GRID_STRIDE * j) as i64;
            let cell = &mut tensor.data[(i * GRID + j) * channels..(i * GRID + j + 1) * channels];
            let mut offset = 0;
            for m in 0..3 {
                let raw = extract_window_features(
                    &stack.models[m],
                    &regions[m],
                    RF_SIZE,
                    RF_SIZE,
                    wy,
                    wx,
                );
                let selected = stack.selectors[m].select_f64(&raw);
                let projected = apply_lnt_unchecked(&stack.lnts[m], &selected);
                for (dst, v) in cell[offset..offset + projected.len()]
                    .iter_mut()
                    .zip(&projected)
                {
                    *dst = *v as f32;
                }
                offset += projected.len();
            }
        }
    }
    tensor
}

/// Per-modality 96 x 96 contexts around the ROI centroid on its peak slice.
pub fn extract_roi_contexts(case: &Case, z: usize, cy: i64, cx: i64) -> [Vec<f64>; 3] {
    let (_, ny, nx) = case.dims();
    [0, 1, 2].map(|m| extract_context(case.volumes[m].slice(z), ny, nx, cy, cx))
}

/// Un-augmented ROI tensor straight from the case.
pub fn extract_roi_patch(
    stack: &FeatureStack,
    case: &Case,
    z: usize,
    cy: i64,
    cx: i64,
) -> RoiPatchTensor {
    let contexts = extract_roi_contexts(case, z, cy, cx);
    let identity = Augmentation::identity();
    let regions = [0, 1, 2].map(|m| region_from_context(&contexts[m], &identity));
    roi_patch_from_regions(stack, &regions)
}

/// Map a residue in [-1, 1] to the regression target in (0, 1); the clamp
/// keeps the training-loss weight finite at the endpoints.
pub fn residue_to_target(epsilon: f64) -> f64 {
    ((epsilon + 1.0) / 2.0).clamp(1e-4, 1.0 - 1e-4)
}

/// Invert the target map for inference: predicted target -> residue estimate.
pub fn prediction_to_residue(y_hat: f64) -> f64 {
    (2.0 * y_hat - 1.0).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(ny: usize, nx: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..ny * nx).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_augmentation_is_exact_crop() {
        let plane = random_plane(200, 200, 0);
        let context = extract_context(&plane, 200, 200, 100, 100);
        let region = region_from_context(&context, &Augmentation::identity());
        let direct = extract_window(&plane, 200, 200, 100, 100, RF_SIZE);
        assert_eq!(region, direct);
    }

    #[test]
    fn integer_shift_is_exact() {
        let plane = random_plane(200, 200, 1);
        let context = extract_context(&plane, 200, 200, 100, 100);
        let aug = Augmentation {
            theta_deg: 0.0,
            shift: (2, -1),
            flip: false,
        };
        let region = region_from_context(&context, &aug);
        let direct = extract_window(&plane, 200, 200, 102, 99, RF_SIZE);
        assert_eq!(region, direct);
    }

    #[test]
    fn flip_mirrors_columns_exactly() {
        let plane = random_plane(200, 200, 2);
        let context = extract_context(&plane, 200, 200, 100, 100);
        let id = region_from_context(&context, &Augmentation::identity());
        let aug = Augmentation {
            theta_deg: 0.0,
            shift: (0, 0),
            flip: true,
        };
        let flipped = region_from_context(&context, &aug);
        for y in 0..RF_SIZE {
            for x in 0..RF_SIZE {
                assert_eq!(flipped[y * RF_SIZE + x], id[y * RF_SIZE + RF_SIZE - 1 - x]);
            }
        }
    }

    #[test]
    fn rotation_preserves_radially_symmetric_fields() {
        // a field that only depends on the distance from the context center is
        // invariant under rotation about that center up to interpolation error
        let center = (CONTEXT_SIZE as f64 - 1.0) / 2.0;
        let context: Vec<f64> = (0..CONTEXT_SIZE * CONTEXT_SIZE)
            .map(|i| {
                let u = (i / CONTEXT_SIZE) as f64 - center;
                let v = (i % CONTEXT_SIZE) as f64 - center;
                (-(u * u + v * v) / 800.0).exp()
            })
            .collect();
        let id = region_from_context(&context, &Augmentation::identity());
        let aug = Augmentation {
            theta_deg: 7.5,
            shift: (0, 0),
            flip: false,
        };
        let rot = region_from_context(&context, &aug);
        let max_err = id
            .iter()
            .zip(&rot)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 2e-3, "max rotation error {max_err}");
    }

    #[test]
    fn rotated_region_stays_inside_context() {
        // the worst-case corner of a rotated + shifted receptive field must
        // still fall inside the 96 x 96 context (no clamped extrapolation)
        let center = (CONTEXT_SIZE as f64 - 1.0) / 2.0;
        let theta = 10.0f64.to_radians();
        let (sin, cos) = theta.sin_cos();
        for &(y, x) in &[(0usize, 0usize), (0, RF_SIZE - 1), (RF_SIZE - 1, 0), (RF_SIZE - 1, RF_SIZE - 1)] {
            let du = (y + CONTEXT_MARGIN) as f64 - center;
            let dv = (x + CONTEXT_MARGIN) as f64 - center;
            let u = center + cos * du - sin * dv + 2.0;
            let v = center + sin * du + cos * dv + 2.0;
            assert!(u >= 0.0 && u <= (CONTEXT_SIZE - 1) as f64);
            assert!(v >= 0.0 && v <= (CONTEXT_SIZE - 1) as f64);
        }
    }

    #[test]
    fn grid_windows_tile_the_receptive_field() {
        // windows read from the cropped region must equal windows read from
        // the full plane at the corresponding absolute centers
        let plane = random_plane(200, 200, 3);
        let (cy, cx) = (100i64, 100i64);
        let context = extract_context(&plane, 200, 200, cy, cx);
        let region = region_from_context(&context, &Augmentation::identity());
        let half = (RF_SIZE / 2) as i64;
        for i in 0..GRID {
            for j in 0..GRID {
                let ry = (CONTEXT_MARGIN + GRID_STRIDE * i) as i64;
                let rx = (CONTEXT_MARGIN + GRID_STRIDE * j) as i64;
                let from_region = extract_window(&region, RF_SIZE, RF_SIZE, ry, rx, 24);
                let from_plane = extract_window(&plane, 200, 200, cy - half + ry, cx - half + rx, 24);
                assert_eq!(from_region, from_plane, "grid node ({i}, {j})");
            }
        }
        // the outermost windows exactly reach the region borders
        assert_eq!(CONTEXT_MARGIN - 24 / 2, 0);
        assert_eq!(CONTEXT_MARGIN + GRID_STRIDE * (GRID - 1) + 24 / 2, RF_SIZE);
    }

    #[test]
    fn first_sampled_augmentation_is_identity() {
        let augs = sample_augmentations(9, 4);
        assert_eq!(augs.len(), 4);
        assert_eq!(augs[0], Augmentation::identity());
        assert_eq!(sample_augmentations(9, 4), augs);
        for a in &augs[1..] {
            assert!(a.theta_deg.abs() < 180.0);
            assert!(a.shift.0.abs() <= 2 && a.shift.1.abs() <= 2);
        }
    }

    #[test]
    fn residue_target_map_round_trips() {
        assert_eq!(residue_to_target(0.0), 0.5);
        assert_eq!(residue_to_target(-1.0), 1e-4);
        assert_eq!(residue_to_target(1.0), 1.0 - 1e-4);
        for &e in &[-0.9, -0.3, 0.0, 0.42, 0.97] {
            let back = prediction_to_residue(residue_to_target(e));
            assert!((back - e).abs() < 1e-12);
        }
        // out-of-range predictions clamp to a valid residue
        assert_eq!(prediction_to_residue(1.5), 1.0);
        assert_eq!(prediction_to_residue(-0.3), -1.0);
    }

    #[test]
    fn tensor_layout_is_row_major_channel_inner() {
        let mut t = RoiPatchTensor::zeros(3, 2);
        for i in 0..t.data.len() {
            t.data[i] = i as f32;
        }
        assert_eq!(t.at(0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1), 1.0);
        assert_eq!(t.at(0, 1, 0), 2.0);
        assert_eq!(t.at(1, 0, 0), 6.0);
        assert_eq!(t.at(2, 2, 1), 17.0);
    }
}

//! Stage 1: voxel classification over concatenated per-modality features,
//! per-slice heatmap prediction, binarization, and 3-D connected-component
//! ROI extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::classifier::{ClassifierConfig, VoxelModel};
use crate::error::{PipelineError, Result};
use crate::features::{FeatureMatrix, FeatureSelector};
use crate::radhop::{extract_window_features, RadHopModel};
use crate::volume::{MaskVolume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub classifier: ClassifierConfig,
    /// in-plane grid stride for dense heatmap prediction
    pub stride: usize,
    /// heatmap binarization threshold
    pub t_p: f64,
    /// minimum connected-component size in voxels
    pub min_voxels: usize,
    /// training voxels sampled per case
    pub pos_per_case: usize,
    pub neg_per_case: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            classifier: ClassifierConfig::default(),
            stride: 4,
            t_p: 0.3,
            min_voxels: 8,
            pos_per_case: 500,
            neg_per_case: 1500,
        }
    }
}

/// Probability volume aligned with its case grid.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub volume: Volume,
    pub stride: usize,
    pub case_id: String,
}

/// One candidate lesion extracted from a heatmap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoiRecord {
    pub roi_id: usize,
    /// component voxels, lexicographically sorted (z, y, x)
    pub voxels: Vec<[u32; 3]>,
    /// argmax heatmap voxel; ties break toward the smallest (z, y, x)
    pub peak: [u32; 3],
    /// maximum voxel probability over the component
    pub p_roi: f64,
    /// rounded mean (y, x) of the component voxels on the peak slice
    pub centroid_inplane: [u32; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_roi: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_prob: Option<f64>,
}

/// Concatenated selected features of one voxel: [t2w 800 | adc 800 | dwi 800].
pub fn voxel_features(
    case: &Case,
    models: &[RadHopModel; 3],
    selectors: &[FeatureSelector; 3],
    z: usize,
    y: usize,
    x: usize,
) -> Vec<f64> {
    let (_, ny, nx) = case.dims();
    let mut out = Vec::with_capacity(selectors.iter().map(|s| s.n_kept()).sum());
    for m in 0..3 {
        let raw = extract_window_features(
            &models[m],
            case.volumes[m].slice(z),
            ny,
            nx,
            y as i64,
            x as i64,
        );
        out.extend(selectors[m].select_f64(&raw));
    }
    out
}

fn sample_coords(
    rng: &mut ChaCha8Rng,
    mut pool: Vec<(usize, usize, usize)>,
    quota: usize,
) -> Vec<(usize, usize, usize)> {
    if pool.len() <= quota {
        return pool;
    }
    for i in 0..quota {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(quota);
    pool
}

/// Balanced voxel sampling over training cases: up to `pos_per_case` lesion
/// voxels and `neg_per_case` background voxels per case, restricted to the
/// gland mask when one is present.
pub fn build_voxel_dataset(
    cases: &[Case],
    models: &[RadHopModel; 3],
    selectors: &[FeatureSelector; 3],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width: usize = selectors.iter().map(|s| s.n_kept()).sum();
    let mut rows: Vec<(usize, usize, usize, usize, u8)> = Vec::new(); // case, z, y, x, label
    for (ci, case) in cases.iter().enumerate() {
        let mask = case.lesion_mask.as_ref().ok_or_else(|| {
            PipelineError::InvalidInput(format!(
                "training case {} lacks a lesion mask",
                case.case_id
            ))
        })?;
        let (nz, ny, nx) = case.dims();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if mask.at(z, y, x) > 0 {
                        pos.push((z, y, x));
                    } else if case.gland_mask.as_ref().map_or(true, |g| g.at(z, y, x) > 0) {
                        neg.push((z, y, x));
                    }
                }
            }
        }
        let pos = sample_coords(&mut rng, pos, cfg.pos_per_case);
        let neg = sample_coords(&mut rng, neg, cfg.neg_per_case);
        rows.extend(pos.into_iter().map(|(z, y, x)| (ci, z, y, x, 1u8)));
        rows.extend(neg.into_iter().map(|(z, y, x)| (ci, z, y, x, 0u8)));
    }

    let mut matrix = FeatureMatrix::zeros(rows.len(), width);
    let mut labels = Vec::with_capacity(rows.len());
    for (r, &(ci, z, y, x, label)) in rows.iter().enumerate() {
        let feats = voxel_features(&cases[ci], models, selectors, z, y, x);
        for (dst, &v) in matrix.row_mut(r).iter_mut().zip(&feats) {
            *dst = v as f32;
        }
        labels.push(label);
    }
    Ok((matrix, labels))
}

/// Dense per-slice heatmap: evaluate the classifier on a stride x stride
/// in-plane grid (inside the gland mask when present), bilinear-upsample to
/// full resolution, and zero every outside-mask voxel.
pub fn predict_heatmap(
    case: &Case,
    models: &[RadHopModel; 3],
    selectors: &[FeatureSelector; 3],
    clf: &dyn VoxelModel,
    stride: usize,
) -> Heatmap {
    assert!(stride >= 1);
    let (nz, ny, nx) = case.dims();
    let gy = (ny - 1) / stride + 1;
    let gx = (nx - 1) / stride + 1;
    let width: usize = selectors.iter().map(|s| s.n_kept()).sum();
    let mut values = vec![0.0f64; nz * ny * nx];
    let mut fbuf = vec![0.0f32; width];
    for z in 0..nz {
        let mut grid = vec![0.0f64; gy * gx];
        for iy in 0..gy {
            let y = iy * stride;
            for ix in 0..gx {
                let x = ix * stride;
                if let Some(g) = &case.gland_mask {
                    if g.at(z, y, x) == 0 {
                        continue;
                    }
                }
                let feats = voxel_features(case, models, selectors, z, y, x);
                for (dst, &v) in fbuf.iter_mut().zip(&feats) {
                    *dst = v as f32;
                }
                grid[iy * gx + ix] = clf.predict_prob(&fbuf).clamp(0.0, 1.0);
            }
        }
        for y in 0..ny {
            let y0 = y / stride;
            let y1 = (y0 + 1).min(gy - 1);
            let fy = (y - y0 * stride) as f64 / stride as f64;
            for x in 0..nx {
                let x0 = x / stride;
                let x1 = (x0 + 1).min(gx - 1);
                let fx = (x - x0 * stride) as f64 / stride as f64;
                let v0 = grid[y0 * gx + x0] * (1.0 - fx) + grid[y0 * gx + x1] * fx;
                let v1 = grid[y1 * gx + x0] * (1.0 - fx) + grid[y1 * gx + x1] * fx;
                let v = (v0 * (1.0 - fy) + v1 * fy).clamp(0.0, 1.0);
                let inside = case
                    .gland_mask
                    .as_ref()
                    .map_or(true, |g| g.at(z, y, x) > 0);
                values[(z * ny + y) * nx + x] = if inside { v } else { 0.0 };
            }
        }
    }
    Heatmap {
        volume: Volume {
            dims: (nz, ny, nx),
            spacing_mm: case.spacing_mm(),
            values,
            modality: "heatmap".to_string(),
        },
        stride,
        case_id: case.case_id.clone(),
    }
}

const NEIGHBORS_26: [(i64, i64, i64); 26] = {
    let mut n = [(0i64, 0i64, 0i64); 26];
    let mut idx = 0;
    let mut dz = -1i64;
    while dz <= 1 {
        let mut dy = -1i64;
        while dy <= 1 {
            let mut dx = -1i64;
            while dx <= 1 {
                if dz != 0 || dy != 0 || dx != 0 {
                    n[idx] = (dz, dy, dx);
                    idx += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    n
};

/// Binarize the heatmap at `t_p` and extract 26-connected 3-D components of
/// at least `min_voxels` voxels as candidate ROIs.
pub fn extract_rois(h: &Heatmap, t_p: f64, min_voxels: usize) -> Vec<RoiRecord> {
    let (nz, ny, nx) = h.volume.dims;
    let vals = &h.volume.values;
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut visited = vec![false; vals.len()];
    let mut rois = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(z, y, x);
                if visited[i] || vals[i] < t_p {
                    continue;
                }
                // BFS flood fill
                let mut component = Vec::new();
                let mut queue = std::collections::VecDeque::new();
                visited[i] = true;
                queue.push_back((z, y, x));
                while let Some((cz, cy, cx)) = queue.pop_front() {
                    component.push([cz as u32, cy as u32, cx as u32]);
                    for (dz, dy, dx) in NEIGHBORS_26 {
                        let (pz, py, px) = (cz as i64 + dz, cy as i64 + dy, cx as i64 + dx);
                        if pz < 0 || py < 0 || px < 0 {
                            continue;
                        }
                        let (pz, py, px) = (pz as usize, py as usize, px as usize);
                        if pz >= nz || py >= ny || px >= nx {
                            continue;
                        }
                        let pi = idx(pz, py, px);
                        if !visited[pi] && vals[pi] >= t_p {
                            visited[pi] = true;
                            queue.push_back((pz, py, px));
                        }
                    }
                }
                if component.len() < min_voxels {
                    continue;
                }
                component.sort_unstable();
                let mut peak = component[0];
                let mut p_roi = vals[idx(peak[0] as usize, peak[1] as usize, peak[2] as usize)];
                for &v in &component[1..] {
                    let p = vals[idx(v[0] as usize, v[1] as usize, v[2] as usize)];
                    if p > p_roi {
                        p_roi = p;
                        peak = v;
                    }
                }
                let peak_slice: Vec<&[u32; 3]> =
                    component.iter().filter(|v| v[0] == peak[0]).collect();
                let n = peak_slice.len() as f64;
                let cy = peak_slice.iter().map(|v| v[1] as f64).sum::<f64>() / n;
                let cx = peak_slice.iter().map(|v| v[2] as f64).sum::<f64>() / n;
                rois.push(RoiRecord {
                    roi_id: rois.len(),
                    voxels: component,
                    peak,
                    p_roi,
                    centroid_inplane: [cy.round() as u32, cx.round() as u32],
                    y_roi: None,
                    epsilon: None,
                    epsilon_hat: None,
                    final_prob: None,
                });
            }
        }
    }
    rois
}

/// Assign ground truth: an ROI is positive iff its peak voxel lies inside any
/// lesion instance; the residue target is Y_roi - P_roi.
pub fn label_rois(rois: &mut [RoiRecord], lesion_mask: &MaskVolume, dims: (usize, usize, usize)) -> Result<()> {
    if lesion_mask.dims != dims {
        return Err(PipelineError::DimsMismatch(format!(
            "lesion mask dims {:?} do not match heatmap dims {:?}",
            lesion_mask.dims, dims
        )));
    }
    for roi in rois {
        let [z, y, x] = roi.peak;
        let hit = lesion_mask.at(z as usize, y as usize, x as usize) > 0;
        let y_roi = u8::from(hit);
        roi.y_roi = Some(y_roi);
        roi.epsilon = Some(y_roi as f64 - roi.p_roi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heatmap_from(dims: (usize, usize, usize), values: Vec<f64>) -> Heatmap {
        Heatmap {
            volume: Volume::new(dims, (3.0, 0.25, 0.25), values, "heatmap").unwrap(),
            stride: 4,
            case_id: "t".to_string(),
        }
    }

    #[test]
    fn two_blobs_two_rois() {
        let dims = (1, 8, 16);
        let mut values = vec![0.0; 128];
        // blob A value 0.9, blob B value 0.5, separated by zeros
        for y in 0..3 {
            for x in 0..3 {
                values[y * 16 + x] = 0.9;
                values[y * 16 + x + 10] = 0.5;
            }
        }
        let rois = extract_rois(&heatmap_from(dims, values), 0.3, 8);
        assert_eq!(rois.len(), 2);
        assert_eq!(rois[0].p_roi, 0.9);
        assert_eq!(rois[1].p_roi, 0.5);
        assert_eq!(rois[0].voxels.len(), 9);
    }

    #[test]
    fn all_below_threshold_gives_no_rois() {
        let dims = (2, 4, 4);
        let values = vec![0.29; 32];
        assert!(extract_rois(&heatmap_from(dims, values), 0.3, 1).is_empty());
    }

    #[test]
    fn diagonal_adjacency_merges_under_26_connectivity() {
        let dims = (3, 6, 6);
        let mut values = vec![0.0; 3 * 36];
        // a diagonal chain across three slices, each voxel diagonal to the next
        let chain = [
            (0usize, 0usize, 0usize),
            (0, 1, 1),
            (1, 2, 2),
            (1, 3, 3),
            (2, 4, 4),
            (2, 5, 5),
            (0, 1, 0),
            (2, 4, 5),
        ];
        for &(z, y, x) in &chain {
            values[(z * 6 + y) * 6 + x] = 0.8;
        }
        let h = heatmap_from(dims, values.clone());
        let rois = extract_rois(&h, 0.3, 1);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].voxels.len(), chain.len());

        // brute-force flood fill oracle on the small grid
        let mut coords: Vec<(usize, usize, usize)> = chain.to_vec();
        coords.sort_unstable();
        let mut groups: Vec<Vec<(usize, usize, usize)>> = Vec::new();
        for &c in &coords {
            let mut joined: Vec<usize> = Vec::new();
            for (gi, group) in groups.iter().enumerate() {
                if group.iter().any(|&(z, y, x)| {
                    (z as i64 - c.0 as i64).abs() <= 1
                        && (y as i64 - c.1 as i64).abs() <= 1
                        && (x as i64 - c.2 as i64).abs() <= 1
                }) {
                    joined.push(gi);
                }
            }
            match joined.as_slice() {
                [] => groups.push(vec![c]),
                [first, rest @ ..] => {
                    let mut merged = groups[*first].clone();
                    merged.push(c);
                    for &gi in rest.iter().rev() {
                        let g = groups.remove(gi);
                        merged.extend(g);
                    }
                    groups[*first] = merged;
                }
            }
        }
        assert_eq!(groups.len(), 1);
    }

    #[test]
    fn rois_partition_super_threshold_voxels() {
        // deterministic pseudo-random heatmap
        let dims = (4, 12, 12);
        let n = 4 * 144;
        let values: Vec<f64> = (0..n).map(|i| ((i * 2654435761usize) % 1000) as f64 / 1000.0).collect();
        let h = heatmap_from(dims, values.clone());
        let t_p = 0.6;
        let rois = extract_rois(&h, t_p, 1);
        let mut seen = std::collections::HashSet::new();
        for r in &rois {
            for v in &r.voxels {
                assert!(seen.insert(*v), "voxel in two ROIs");
                let val = values[((v[0] as usize * 12) + v[1] as usize) * 12 + v[2] as usize];
                assert!(val >= t_p);
            }
            // P_roi is the max over component voxels
            let max = r
                .voxels
                .iter()
                .map(|v| values[((v[0] as usize * 12) + v[1] as usize) * 12 + v[2] as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.p_roi, max);
            assert!(r.voxels.contains(&r.peak));
        }
        let super_count = values.iter().filter(|&&v| v >= t_p).count();
        assert_eq!(seen.len(), super_count);
    }

    #[test]
    fn super_threshold_set_shrinks_with_t_p() {
        let values: Vec<f64> = (0..200).map(|i| (i % 100) as f64 / 100.0).collect();
        let count = |t: f64| values.iter().filter(|&&v| v >= t).count();
        assert!(count(0.5) >= count(0.6));
        assert!(count(0.6) >= count(0.9));
    }

    #[test]
    fn label_rois_implements_residue_arithmetic() {
        let dims = (1, 4, 4);
        let mut mask = MaskVolume {
            dims,
            spacing_mm: (3.0, 0.25, 0.25),
            values: vec![0; 16],
        };
        mask.values[5] = 1; // (0,1,1)
        let mk_roi = |peak: [u32; 3], p: f64| RoiRecord {
            roi_id: 0,
            voxels: vec![peak],
            peak,
            p_roi: p,
            centroid_inplane: [peak[1], peak[2]],
            y_roi: None,
            epsilon: None,
            epsilon_hat: None,
            final_prob: None,
        };
        let mut rois = vec![
            mk_roi([0, 1, 1], 0.3),
            mk_roi([0, 3, 3], 0.6),
            mk_roi([0, 1, 1], 1.0),
        ];
        label_rois(&mut rois, &mask, dims).unwrap();
        assert_eq!(rois[0].epsilon, Some(0.7));
        assert_eq!(rois[1].epsilon, Some(-0.6));
        assert_eq!(rois[2].epsilon, Some(0.0));
        for r in &rois {
            let e = r.epsilon.unwrap();
            assert!((-1.0..=1.0).contains(&e));
            if r.y_roi == Some(1) {
                assert!(e >= 0.0);
            } else {
                assert!(e <= 0.0);
            }
        }
    }

    #[test]
    fn label_rois_rejects_misaligned_mask() {
        let mask = MaskVolume {
            dims: (1, 3, 3),
            spacing_mm: (3.0, 0.25, 0.25),
            values: vec![0; 9],
        };
        assert!(label_rois(&mut [], &mask, (1, 4, 4)).is_err());
    }

    #[test]
    fn peak_tie_breaks_lexicographically() {
        let dims = (1, 4, 4);
        let mut values = vec![0.0; 16];
        values[1 * 4 + 1] = 0.7;
        values[1 * 4 + 2] = 0.7;
        values[2 * 4 + 1] = 0.7;
        values[2 * 4 + 2] = 0.7;
        let rois = extract_rois(&heatmap_from(dims, values), 0.3, 1);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].peak, [0, 1, 1]);
    }
}

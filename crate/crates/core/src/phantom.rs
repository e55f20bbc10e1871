//! Deterministic synthetic-case generator: three pseudo-modalities over an
//! ellipsoidal "gland", with planted ellipsoidal lesions and thin curved-band
//! distractors. Distractors share the lesions' tri-modal contrast so their
//! small-window texture is lesion-like, but their elongated shape only reads
//! as a non-lesion at a larger receptive field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::case::{Case, ManifestEntry, MODALITIES};
use crate::error::{PipelineError, Result};
use crate::volume::{voxel_count, MaskVolume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    /// Poisson mean of the lesion count
    pub lesion_mean: f64,
    pub max_lesions: usize,
    /// Poisson mean of the distractor count
    pub distractor_mean: f64,
    pub max_distractors: usize,
    /// uniform range of the in-plane lesion radius, voxels
    pub lesion_radius: (f64, f64),
    /// additive contrast per modality, ordered like [`MODALITIES`]
    pub contrast: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (16, 96, 96),
            spacing_mm: (3.0, 0.25, 0.25),
            lesion_mean: 1.2,
            max_lesions: 3,
            distractor_mean: 2.0,
            max_distractors: 4,
            lesion_radius: (3.0, 7.0),
            contrast: [-0.15, -0.35, 0.35],
            noise_sigma: 0.08,
        }
    }
}

/// Extra generation detail kept for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct PhantomMeta {
    pub lesion_voxels: Vec<Vec<[u32; 3]>>,
    pub distractor_voxels: Vec<Vec<[u32; 3]>>,
    /// shapes abandoned after the rejection-sampling attempt budget
    pub dropped: usize,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let limit = (-mean).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// normalized squared ellipsoid radius of a voxel w.r.t. the gland
fn gland_radius(dims: (usize, usize, usize), z: f64, y: f64, x: f64) -> f64 {
    let (nz, ny, nx) = dims;
    let cz = (nz as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;
    let az = 0.42 * nz as f64;
    let ay = 0.40 * ny as f64;
    let ax = 0.40 * nx as f64;
    let dz = (z - cz) / az;
    let dy = (y - cy) / ay;
    let dx = (x - cx) / ax;
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// 3-tap [1, 2, 1] / 4 smoothing along one axis with edge replication.
fn smooth_axis(values: &mut [f64], dims: (usize, usize, usize), axis: usize) {
    let (nz, ny, nx) = dims;
    let n = [nz, ny, nx][axis];
    let stride = match axis {
        0 => ny * nx,
        1 => nx,
        _ => 1,
    };
    let lines = voxel_count(dims) / n;
    let mut buf = vec![0.0f64; n];
    for line in 0..lines {
        // base offset of this line in the flattened volume
        let base = match axis {
            0 => line,
            1 => (line / nx) * ny * nx + line % nx,
            _ => line * nx,
        };
        for i in 0..n {
            buf[i] = values[base + i * stride];
        }
        for i in 0..n {
            let a = buf[i.saturating_sub(1)];
            let b = buf[i];
            let c = buf[(i + 1).min(n - 1)];
            values[base + i * stride] = (a + 2.0 * b + c) / 4.0;
        }
    }
}

struct Shape {
    voxels: Vec<[u32; 3]>,
    /// per-voxel soft-edge factor in (0, 1]
    weights: Vec<f64>,
}

/// Rasterize one soft-edged ellipsoid into `voxels`/`weights`; `None` if it
/// leaves the gland or touches occupied voxels.
#[allow(clippy::too_many_arguments)]
fn rasterize_ellipsoid(
    dims: (usize, usize, usize),
    occupied: &[bool],
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
    voxels: &mut Vec<[u32; 3]>,
    weights: &mut Vec<f64>,
) -> Option<()> {
    let (nz, ny, nx) = dims;
    let (cz, cy, cx) = center;
    let (rz, ry, rx) = radii;
    let z0 = (cz - rz).floor().max(0.0) as usize;
    let z1 = ((cz + rz).ceil() as usize).min(nz - 1);
    let y0 = (cy - ry).floor().max(0.0) as usize;
    let y1 = ((cy + ry).ceil() as usize).min(ny - 1);
    let x0 = (cx - rx).floor().max(0.0) as usize;
    let x1 = ((cx + rx).ceil() as usize).min(nx - 1);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dz = (z as f64 - cz) / rz;
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let r = (dz * dz + dy * dy + dx * dx).sqrt();
                if r > 1.0 {
                    continue;
                }
                if gland_radius(dims, z as f64, y as f64, x as f64) > 0.9 {
                    return None; // must sit fully inside the gland
                }
                if occupied[(z * ny + y) * nx + x] {
                    return None;
                }
                voxels.push([z as u32, y as u32, x as u32]);
                weights.push(((1.0 - r) / 0.3).clamp(0.2, 1.0));
            }
        }
    }
    Some(())
}

/// Rasterize a lesion ellipsoid; `None` if it leaves the gland or touches
/// occupied voxels.
fn try_lesion(
    dims: (usize, usize, usize),
    occupied: &[bool],
    rng: &mut ChaCha8Rng,
    radius_range: (f64, f64),
) -> Option<Shape> {
    let (nz, ny, nx) = dims;
    let rz = rng.gen_range(0.9..1.8);
    let ry = rng.gen_range(radius_range.0..radius_range.1);
    let rx = rng.gen_range(radius_range.0..radius_range.1);
    let cz = rng.gen_range(2.0..nz as f64 - 3.0);
    let cy = rng.gen_range(0.2 * ny as f64..0.8 * ny as f64);
    let cx = rng.gen_range(0.2 * nx as f64..0.8 * nx as f64);
    let mut voxels = Vec::new();
    let mut weights = Vec::new();
    rasterize_ellipsoid(
        dims,
        occupied,
        (cz, cy, cx),
        (rz, ry, rx),
        &mut voxels,
        &mut weights,
    )?;
    if voxels.len() < 8 {
        return None;
    }
    Some(Shape { voxels, weights })
}

/// Minimum in-plane spacing between consecutive distractor nodules.
///
/// Every nodule looks exactly like a lesion inside one analysis window,
/// while the next nodule of the chain sits outside that window but inside
/// the expanded receptive field, so only the larger context can tell a
/// chain apart from an isolated lesion.
const BEAD_SPACING: (f64, f64) = (20.0, 26.0);

/// Rasterize a curved chain of 2-3 lesion-like nodules spaced along a
/// circular arc ("beaded band"); `None` if any nodule leaves the gland or
/// touches occupied voxels.
fn try_distractor(
    dims: (usize, usize, usize),
    occupied: &[bool],
    rng: &mut ChaCha8Rng,
    radius_range: (f64, f64),
) -> Option<Shape> {
    let (nz, ny, nx) = dims;
    let arc_r = rng.gen_range(25.0..40.0);
    let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let spacing = rng.gen_range(BEAD_SPACING.0..BEAD_SPACING.1);
    let n_beads = rng.gen_range(2..=3usize);
    let ay = rng.gen_range(0.1 * ny as f64..0.9 * ny as f64);
    let ax = rng.gen_range(0.1 * nx as f64..0.9 * nx as f64);
    let cz = rng.gen_range(2.0..nz as f64 - 3.0);
    let mut voxels = Vec::new();
    let mut weights = Vec::new();
    for b in 0..n_beads {
        let theta = theta0 + (b as f64 * spacing) / arc_r;
        let by = ay + arc_r * theta.cos();
        let bx = ax + arc_r * theta.sin();
        // keep nodule centers inside the same central box lesions are drawn
        // from, so location gives no away-tell at the single-window scale
        if !(0.2 * ny as f64..0.8 * ny as f64).contains(&by)
            || !(0.2 * nx as f64..0.8 * nx as f64).contains(&bx)
        {
            return None;
        }
        let rz = rng.gen_range(0.9..1.8);
        let ry = rng.gen_range(radius_range.0..radius_range.1);
        let rx = rng.gen_range(radius_range.0..radius_range.1);
        let before = voxels.len();
        rasterize_ellipsoid(
            dims,
            occupied,
            (cz, by, bx),
            (rz, ry, rx),
            &mut voxels,
            &mut weights,
        )?;
        if voxels.len() - before < 8 {
            return None; // nodule clipped by the volume boundary
        }
    }
    if voxels.len() < 40 {
        return None;
    }
    Some(Shape { voxels, weights })
}

/// Generate one deterministic case with lesion and gland masks.
pub fn generate_phantom_case(cfg: &PhantomConfig, case_seed: u64, case_id: &str) -> Case {
    generate_phantom_case_with_meta(cfg, case_seed, case_id).0
}

pub fn generate_phantom_case_with_meta(
    cfg: &PhantomConfig,
    case_seed: u64,
    case_id: &str,
) -> (Case, PhantomMeta) {
    let dims = cfg.dims;
    let (nz, ny, nx) = dims;
    let n = voxel_count(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);

    // gland plateau + mask
    let mut base = vec![0.0f64; n];
    let mut gland = vec![0u16; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let r = gland_radius(dims, z as f64, y as f64, x as f64);
                let i = (z * ny + y) * nx + x;
                base[i] = 0.2 + 0.3 / (1.0 + ((r - 1.0) / 0.05).exp());
                if r <= 1.0 {
                    gland[i] = 1;
                }
            }
        }
    }

    // shapes, lesions first, sharing one occupancy grid
    let mut occupied = vec![false; n];
    let mut dropped = 0usize;
    let mut lesions: Vec<Shape> = Vec::new();
    let n_lesions = poisson(&mut rng, cfg.lesion_mean).min(cfg.max_lesions);
    for _ in 0..n_lesions {
        let mut placed = false;
        for _ in 0..100 {
            if let Some(s) = try_lesion(dims, &occupied, &mut rng, cfg.lesion_radius) {
                for v in &s.voxels {
                    occupied[(v[0] as usize * ny + v[1] as usize) * nx + v[2] as usize] = true;
                }
                lesions.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            dropped += 1;
        }
    }
    let mut distractors: Vec<Shape> = Vec::new();
    let n_distractors = poisson(&mut rng, cfg.distractor_mean).min(cfg.max_distractors);
    for _ in 0..n_distractors {
        let mut placed = false;
        for _ in 0..100 {
            if let Some(s) = try_distractor(dims, &occupied, &mut rng, cfg.lesion_radius) {
                for v in &s.voxels {
                    occupied[(v[0] as usize * ny + v[1] as usize) * nx + v[2] as usize] = true;
                }
                distractors.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            dropped += 1;
        }
    }

    // per-modality volume = base + structures * contrast + smoothed noise
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
    let volumes: [Volume; 3] = std::array::from_fn(|m| {
        let mut values = base.clone();
        let contrast = cfg.contrast[m];
        for shape in lesions.iter().chain(&distractors) {
            for (v, &w) in shape.voxels.iter().zip(&shape.weights) {
                values[(v[0] as usize * ny + v[1] as usize) * nx + v[2] as usize] += contrast * w;
            }
        }
        let mut noise: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for axis in 0..3 {
            smooth_axis(&mut noise, dims, axis);
        }
        for (v, nz_) in values.iter_mut().zip(&noise) {
            *v += nz_;
        }
        Volume {
            dims,
            spacing_mm: cfg.spacing_mm,
            values,
            modality: MODALITIES[m].to_string(),
        }
    });

    let mut lesion_mask = vec![0u16; n];
    for (li, shape) in lesions.iter().enumerate() {
        for v in &shape.voxels {
            lesion_mask[(v[0] as usize * ny + v[1] as usize) * nx + v[2] as usize] = li as u16 + 1;
        }
    }
    let case = Case {
        case_id: case_id.to_string(),
        volumes,
        lesion_mask: Some(MaskVolume {
            dims,
            spacing_mm: cfg.spacing_mm,
            values: lesion_mask,
        }),
        gland_mask: Some(MaskVolume {
            dims,
            spacing_mm: cfg.spacing_mm,
            values: gland,
        }),
    };
    let meta = PhantomMeta {
        lesion_voxels: lesions.into_iter().map(|s| s.voxels).collect(),
        distractor_voxels: distractors.into_iter().map(|s| s.voxels).collect(),
        dropped,
    };
    (case, meta)
}

/// Write `n_cases` cases and three disjoint split manifests under `out_dir`.
/// Per-case seeds are `master_seed + index`, so any case can be regenerated
/// independently.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_cases: usize,
    split: (f64, f64, f64),
    master_seed: u64,
    out_dir: &std::path::Path,
) -> Result<[std::path::PathBuf; 3]> {
    if n_cases < 3 {
        return Err(PipelineError::InvalidInput(format!(
            "need at least 3 cases for a train/val/test split, got {n_cases}"
        )));
    }
    let total = split.0 + split.1 + split.2;
    if (total - 1.0).abs() > 1e-9 || split.0 <= 0.0 || split.1 < 0.0 || split.2 < 0.0 {
        return Err(PipelineError::InvalidInput(format!(
            "split fractions {split:?} must be non-negative and sum to 1"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let n_train = (n_cases as f64 * split.0).round() as usize;
    let n_val = (n_cases as f64 * split.1).round() as usize;
    let n_train = n_train.max(1).min(n_cases - 2).max(1);
    let n_val = n_val.min(n_cases - n_train - 1);
    let mut manifests: [Vec<ManifestEntry>; 3] = Default::default();
    for idx in 0..n_cases {
        let case_id = format!("case_{idx:04}");
        let case = generate_phantom_case(cfg, master_seed.wrapping_add(idx as u64), &case_id);
        let entry = ManifestEntry {
            case_id: case_id.clone(),
            t2w: format!("{case_id}_t2w.mvol"),
            adc: format!("{case_id}_adc.mvol"),
            dwi: format!("{case_id}_dwi.mvol"),
            lesion_mask: Some(format!("{case_id}_lesions.mvol")),
            gland_mask: Some(format!("{case_id}_gland.mvol")),
        };
        for (vol, rel) in case.volumes.iter().zip([&entry.t2w, &entry.adc, &entry.dwi]) {
            vol.write_mvol(&out_dir.join(rel))?;
        }
        case.lesion_mask
            .as_ref()
            .unwrap()
            .write_mvol(&out_dir.join(entry.lesion_mask.as_ref().unwrap()), "lesion_mask")?;
        case.gland_mask
            .as_ref()
            .unwrap()
            .write_mvol(&out_dir.join(entry.gland_mask.as_ref().unwrap()), "gland_mask")?;
        // manifest paths are relative to the manifest file's directory
        let bucket = if idx < n_train {
            0
        } else if idx < n_train + n_val {
            1
        } else {
            2
        };
        manifests[bucket].push(entry);
    }
    let names = ["train.json", "val.json", "test.json"];
    let mut out = Vec::new();
    for (entries, name) in manifests.iter().zip(names) {
        let path = out_dir.join(name);
        crate::case::write_manifest(&path, entries)?;
        out.push(path);
    }
    Ok([out[0].clone(), out[1].clone(), out[2].clone()])
}

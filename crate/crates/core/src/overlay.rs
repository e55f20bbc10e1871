//! Diagnostic slice overlays: candidate voxels painted over the first
//! modality, green when the candidate hits a lesion and red otherwise,
//! written as binary PPM images.

use std::io::Write as _;
use std::path::Path;

use crate::case::Case;
use crate::error::{PipelineError, Result};
use crate::stage1::RoiRecord;

/// Blend factor of the colored candidate voxels over the grayscale base.
const ALPHA: f64 = 0.6;

fn gray(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render one slice to RGB bytes.
fn render_slice(case: &Case, rois: &[RoiRecord], z: usize) -> Vec<u8> {
    let (_, ny, nx) = case.dims();
    let plane = case.volumes[0].slice(z);
    let mut rgb = vec![0u8; ny * nx * 3];
    for (i, &v) in plane.iter().enumerate() {
        let g = gray(v);
        rgb[i * 3] = g;
        rgb[i * 3 + 1] = g;
        rgb[i * 3 + 2] = g;
    }
    for roi in rois {
        // a candidate counts as a hit when its label says so
        let hit = roi.y_roi == Some(1);
        for v in &roi.voxels {
            if v[0] as usize != z {
                continue;
            }
            let i = v[1] as usize * nx + v[2] as usize;
            let base = plane[i].clamp(0.0, 1.0);
            let color: [f64; 3] = if hit { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
            for c in 0..3 {
                rgb[i * 3 + c] = gray(base * (1.0 - ALPHA) + color[c] * ALPHA);
            }
        }
    }
    rgb
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let header = format!("P6\n{width} {height}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(rgb))
        .map_err(|e| PipelineError::io(path, e))
}

/// Write one PPM per slice that contains candidate voxels, named
/// `<case_id>_z<slice>.ppm`.
pub fn write_case_overlays(dir: &Path, case: &Case, rois: &[RoiRecord]) -> Result<()> {
    let (nz, ny, nx) = case.dims();
    let mut slices: Vec<bool> = vec![false; nz];
    for roi in rois {
        for v in &roi.voxels {
            slices[v[0] as usize] = true;
        }
    }
    for (z, used) in slices.iter().enumerate() {
        if !used {
            continue;
        }
        let rgb = render_slice(case, rois, z);
        let path = dir.join(format!("{}_z{:02}.ppm", case.case_id, z));
        write_ppm(&path, nx, ny, &rgb)?;
    }
    Ok(())
}

//! Cases: three co-registered modality volumes plus optional label masks,
//! and the `cases.json` manifest format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::volume::{MaskVolume, Volume};

pub const MODALITIES: [&str; 3] = ["t2w", "adc", "dwi"];

/// One patient-level sample: exactly three aligned modality volumes,
/// optional lesion instance mask and gland mask.
#[derive(Debug, Clone)]
pub struct Case {
    pub case_id: String,
    /// Order: [t2w, adc, dwi].
    pub volumes: [Volume; 3],
    /// 0 = background, k >= 1 = lesion instance k (contiguous from 1).
    pub lesion_mask: Option<MaskVolume>,
    /// Binary gland mask (nonzero = inside gland).
    pub gland_mask: Option<MaskVolume>,
}

/// One record of a `cases.json` manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub t2w: String,
    pub adc: String,
    pub dwi: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lesion_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gland_mask: Option<String>,
}

impl Case {
    pub fn new(
        case_id: impl Into<String>,
        volumes: [Volume; 3],
        lesion_mask: Option<MaskVolume>,
        gland_mask: Option<MaskVolume>,
    ) -> Result<Self> {
        let c = Case {
            case_id: case_id.into(),
            volumes,
            lesion_mask,
            gland_mask,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.volumes[0].dims
    }

    pub fn spacing_mm(&self) -> (f64, f64, f64) {
        self.volumes[0].spacing_mm
    }

    /// 1 iff the lesion mask contains at least one instance.
    pub fn patient_label(&self) -> Option<u8> {
        self.lesion_mask
            .as_ref()
            .map(|m| u8::from(m.values.iter().any(|&v| v > 0)))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.volumes[0].dims;
        let spacing = self.volumes[0].spacing_mm;
        for v in &self.volumes {
            v.validate()?;
            if v.dims != dims || v.spacing_mm != spacing {
                return Err(PipelineError::DimsMismatch(format!(
                    "case {}: volume {} has dims {:?} spacing {:?}, expected {:?} {:?}",
                    self.case_id, v.modality, v.dims, v.spacing_mm, dims, spacing
                )));
            }
        }
        for (name, mask) in [("lesion_mask", &self.lesion_mask), ("gland_mask", &self.gland_mask)] {
            if let Some(m) = mask {
                if m.dims != dims {
                    return Err(PipelineError::DimsMismatch(format!(
                        "case {}: {} dims {:?} do not match volume dims {:?}",
                        self.case_id, name, m.dims, dims
                    )));
                }
            }
        }
        if let Some(m) = &self.lesion_mask {
            // instance ids must be contiguous from 1
            let max = m.max_label();
            for k in 1..=max {
                if !m.values.iter().any(|&v| v == k) {
                    return Err(PipelineError::InvalidInput(format!(
                        "case {}: lesion instance ids not contiguous, missing {}",
                        self.case_id, k
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load a case from a manifest entry, resolving paths against `base_dir`.
pub fn load_case(entry: &ManifestEntry, base_dir: &Path) -> Result<Case> {
    let load = |rel: &str, modality: &str| -> Result<Volume> {
        let mut v = Volume::read_mvol(&base_dir.join(rel))?;
        v.modality = modality.to_string();
        Ok(v)
    };
    let volumes = [
        load(&entry.t2w, "t2w")?,
        load(&entry.adc, "adc")?,
        load(&entry.dwi, "dwi")?,
    ];
    let lesion_mask = entry
        .lesion_mask
        .as_ref()
        .map(|p| MaskVolume::read_mvol(&base_dir.join(p)))
        .transpose()?;
    let gland_mask = entry
        .gland_mask
        .as_ref()
        .map(|p| MaskVolume::read_mvol(&base_dir.join(p)))
        .transpose()?;
    Case::new(entry.case_id.clone(), volumes, lesion_mask, gland_mask)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::parse(path, e.to_string()))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)
        .map_err(|e| PipelineError::parse(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Load every case referenced by a manifest file.
pub fn load_manifest_cases(manifest_path: &Path) -> Result<Vec<Case>> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    entries.iter().map(|e| load_case(e, &base)).collect()
}

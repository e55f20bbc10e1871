//! Dense scalar volumes and the `.mvol` on-disk format.
//!
//! An `.mvol` file is a single UTF-8 header line holding a JSON object
//! `{"dims":[nz,ny,nx],"spacing_mm":[sz,sy,sx],"dtype":"f32le","modality":"..."}`
//! terminated by `\n`, followed immediately by the voxel payload in z-major
//! order (z slowest, x fastest). Scalar volumes use `f32le`, label masks `u16le`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// A 3-D scalar grid with physical spacing. Values are stored as `f64`
/// in memory; the on-disk payload is `f32le`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// (nz, ny, nx) voxel counts.
    pub dims: (usize, usize, usize),
    /// (sz, sy, sx) millimeters per voxel.
    pub spacing_mm: (f64, f64, f64),
    /// z-major dense grid, length nz*ny*nx.
    pub values: Vec<f64>,
    /// Tag such as "t2w", "adc", "dwi" or "heatmap".
    pub modality: String,
}

/// Integer label grid aligned with a [`Volume`]. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub values: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
struct MvolHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    modality: String,
}

pub fn voxel_count(dims: (usize, usize, usize)) -> usize {
    dims.0 * dims.1 * dims.2
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        values: Vec<f64>,
        modality: impl Into<String>,
    ) -> Result<Self> {
        let v = Volume {
            dims,
            spacing_mm,
            values,
            modality: modality.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (nz, ny, nx) = self.dims;
        if nz < 1 || ny < 1 || nx < 1 {
            return Err(PipelineError::InvalidInput(format!(
                "volume dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        let (sz, sy, sx) = self.spacing_mm;
        if !(sz > 0.0 && sy > 0.0 && sx > 0.0) {
            return Err(PipelineError::InvalidInput(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.values.len() != voxel_count(self.dims) {
            return Err(PipelineError::DimsMismatch(format!(
                "value buffer has {} voxels, dims {:?} imply {}",
                self.values.len(),
                self.dims,
                voxel_count(self.dims)
            )));
        }
        if let Some(off) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(PipelineError::InvalidInput(format!(
                "non-finite voxel at linear offset {off}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(z, y, x)]
    }

    /// Borrow one z-slice as a contiguous ny*nx row-major plane.
    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.dims.1 * self.dims.2;
        &self.values[z * plane..(z + 1) * plane]
    }

    pub fn write_mvol(&self, path: &Path) -> Result<()> {
        let header = MvolHeader {
            dims: [self.dims.0, self.dims.1, self.dims.2],
            spacing_mm: [self.spacing_mm.0, self.spacing_mm.1, self.spacing_mm.2],
            dtype: "f32le".to_string(),
            modality: self.modality.clone(),
        };
        let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_header(&mut w, &header, path)?;
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| PipelineError::io(path, e))?;
        }
        w.flush().map_err(|e| PipelineError::io(path, e))
    }

    pub fn read_mvol(path: &Path) -> Result<Self> {
        let (header, payload) = read_raw(path)?;
        if header.dtype != "f32le" {
            return Err(PipelineError::parse(
                path,
                format!("expected dtype f32le, got {}", header.dtype),
            ));
        }
        let n = header.dims[0] * header.dims[1] * header.dims[2];
        if payload.len() != n * 4 {
            return Err(PipelineError::parse(
                path,
                format!("payload is {} bytes, expected {}", payload.len(), n * 4),
            ));
        }
        let mut values = Vec::with_capacity(n);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(PipelineError::NonFiniteVoxel {
                    path: path.to_path_buf(),
                    offset: i,
                });
            }
            values.push(v);
        }
        Ok(Volume {
            dims: (header.dims[0], header.dims[1], header.dims[2]),
            spacing_mm: (
                header.spacing_mm[0],
                header.spacing_mm[1],
                header.spacing_mm[2],
            ),
            values,
            modality: header.modality,
        })
    }
}

impl MaskVolume {
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u16 {
        self.values[self.index(z, y, x)]
    }

    pub fn max_label(&self) -> u16 {
        self.values.iter().copied().max().unwrap_or(0)
    }

    pub fn write_mvol(&self, path: &Path, modality: &str) -> Result<()> {
        let header = MvolHeader {
            dims: [self.dims.0, self.dims.1, self.dims.2],
            spacing_mm: [self.spacing_mm.0, self.spacing_mm.1, self.spacing_mm.2],
            dtype: "u16le".to_string(),
            modality: modality.to_string(),
        };
        let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_header(&mut w, &header, path)?;
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| PipelineError::io(path, e))?;
        }
        w.flush().map_err(|e| PipelineError::io(path, e))
    }

    pub fn read_mvol(path: &Path) -> Result<Self> {
        let (header, payload) = read_raw(path)?;
        if header.dtype != "u16le" {
            return Err(PipelineError::parse(
                path,
                format!("expected dtype u16le, got {}", header.dtype),
            ));
        }
        let n = header.dims[0] * header.dims[1] * header.dims[2];
        if payload.len() != n * 2 {
            return Err(PipelineError::parse(
                path,
                format!("payload is {} bytes, expected {}", payload.len(), n * 2),
            ));
        }
        let values = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(MaskVolume {
            dims: (header.dims[0], header.dims[1], header.dims[2]),
            spacing_mm: (
                header.spacing_mm[0],
                header.spacing_mm[1],
                header.spacing_mm[2],
            ),
            values,
        })
    }
}

fn write_header<W: Write>(w: &mut W, header: &MvolHeader, path: &Path) -> Result<()> {
    let mut line = serde_json::to_string(header)
        .map_err(|e| PipelineError::parse(path, e.to_string()))?;
    line.push('\n');
    w.write_all(line.as_bytes())
        .map_err(|e| PipelineError::io(path, e))
}

fn read_raw(path: &Path) -> Result<(MvolHeader, Vec<u8>)> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|e| PipelineError::io(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(PipelineError::parse(path, "header line exceeds 4096 bytes"));
        }
    }
    let header: MvolHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| PipelineError::parse(path, e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| PipelineError::io(path, e))?;
    Ok((header, payload))
}

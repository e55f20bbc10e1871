//! Model persistence: a human-readable JSON descriptor per artifact plus a
//! little-endian f32 sidecar blob for the numeric arrays, referenced by name.
//! Loading always goes through the on-disk representation, so every consumer
//! sees the same (f32-rounded) parameters regardless of which process
//! trained them; save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::features::{FeatureSelector, LntProjector};
use crate::net::{LayerSpec, Network, Shape};
use crate::radhop::RadHopModel;
use crate::saab::SaabKernelSet;

pub const STAGE1_FORMAT: &str = "radhop-model-v1";
pub const NET_FORMAT: &str = "radhopnet-v1";

/// Accumulates named f32 arrays for one sidecar file.
#[derive(Default)]
pub struct BlobWriter {
    index: BTreeMap<String, (usize, usize)>, // name -> (offset in f32s, len)
    data: Vec<u8>,
}

impl BlobWriter {
    pub fn put(&mut self, name: &str, values: &[f64]) {
        let offset = self.data.len() / 4;
        for &v in values {
            self.data.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let prev = self.index.insert(name.to_string(), (offset, values.len()));
        assert!(prev.is_none(), "duplicate blob name {name}");
    }

    pub fn index(&self) -> &BTreeMap<String, (usize, usize)> {
        &self.index
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
        f.write_all(&self.data).map_err(|e| PipelineError::io(path, e))
    }
}

/// Reads named arrays back out of a sidecar file.
pub struct BlobReader {
    index: BTreeMap<String, (usize, usize)>,
    data: Vec<u8>,
}

impl BlobReader {
    pub fn open(path: &Path, index: BTreeMap<String, (usize, usize)>) -> Result<BlobReader> {
        let mut data = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut data))
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(BlobReader { index, data })
    }

    pub fn get(&self, name: &str) -> Result<Vec<f64>> {
        let &(offset, len) = self.index.get(name).ok_or_else(|| {
            PipelineError::InvalidInput(format!("model blob lacks array {name:?}"))
        })?;
        let start = offset * 4;
        let end = start + len * 4;
        if end > self.data.len() {
            return Err(PipelineError::InvalidInput(format!(
                "blob array {name:?} [{start}, {end}) exceeds file size {}",
                self.data.len()
            )));
        }
        Ok(self.data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct SaabDescriptor {
    patch_dim: usize,
    kept: usize,
    dc_energy: f64,
    bias: f64,
    /// blob names
    ac_kernels: String,
    energies: String,
}

fn put_saab(blob: &mut BlobWriter, prefix: &str, s: &SaabKernelSet) -> SaabDescriptor {
    let ac_name = format!("{prefix}.ac_kernels");
    let en_name = format!("{prefix}.energies");
    blob.put(&ac_name, &s.ac_kernels);
    blob.put(&en_name, &s.energies);
    SaabDescriptor {
        patch_dim: s.patch_dim,
        kept: s.kept,
        dc_energy: s.dc_energy,
        bias: s.bias,
        ac_kernels: ac_name,
        energies: en_name,
    }
}

fn get_saab(blob: &BlobReader, d: &SaabDescriptor) -> Result<SaabKernelSet> {
    let ac_kernels = blob.get(&d.ac_kernels)?;
    let energies = blob.get(&d.energies)?;
    if ac_kernels.len() != d.kept * d.patch_dim || energies.len() != d.kept {
        return Err(PipelineError::InvalidInput(format!(
            "saab descriptor {} inconsistent with blob sizes",
            d.ac_kernels
        )));
    }
    Ok(SaabKernelSet {
        patch_dim: d.patch_dim,
        kept: d.kept,
        ac_kernels,
        energies,
        dc_energy: d.dc_energy,
        bias: d.bias,
    })
}

#[derive(Serialize, Deserialize)]
struct RadHopDescriptor {
    window: usize,
    energy_threshold: f64,
    f_raw: usize,
    hop1: SaabDescriptor,
    hop2: Vec<SaabDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct LntDescriptor {
    in_dim: usize,
    lambda: f64,
    seed: u64,
    subsets: Vec<Vec<u32>>,
    weights: Vec<String>,
    intercepts: String,
}

#[derive(Serialize, Deserialize)]
struct Stage1Descriptor {
    format: String,
    modality: String,
    blob_file: String,
    radhop: RadHopDescriptor,
    selector_kept: Vec<u32>,
    selector_scores: String,
    lnt: LntDescriptor,
    blobs: BTreeMap<String, (usize, usize)>,
}

/// The frozen per-modality stage-1 feature machinery.
pub struct Stage1Bundle {
    pub modality: String,
    pub radhop: RadHopModel,
    pub selector: FeatureSelector,
    pub lnt: LntProjector,
}

/// Writes `<stem>.json` and `<stem>.bin` next to each other.
pub fn save_stage1_bundle(dir: &Path, stem: &str, bundle: &Stage1Bundle) -> Result<()> {
    let mut blob = BlobWriter::default();
    let hop1 = put_saab(&mut blob, "hop1", &bundle.radhop.hop1);
    let hop2: Vec<SaabDescriptor> = bundle
        .radhop
        .hop2
        .iter()
        .enumerate()
        .map(|(i, s)| put_saab(&mut blob, &format!("hop2.{i}"), s))
        .collect();
    blob.put("selector.scores", &bundle.selector.scores);
    let weights: Vec<String> = bundle
        .lnt
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let name = format!("lnt.weights.{i}");
            blob.put(&name, w);
            name
        })
        .collect();
    blob.put("lnt.intercepts", &bundle.lnt.intercepts);
    let descriptor = Stage1Descriptor {
        format: STAGE1_FORMAT.to_string(),
        modality: bundle.modality.clone(),
        blob_file: format!("{stem}.bin"),
        radhop: RadHopDescriptor {
            window: bundle.radhop.window,
            energy_threshold: bundle.radhop.energy_threshold,
            f_raw: bundle.radhop.f_raw,
            hop1,
            hop2,
        },
        selector_kept: bundle.selector.kept_indices.clone(),
        selector_scores: "selector.scores".to_string(),
        lnt: LntDescriptor {
            in_dim: bundle.lnt.in_dim,
            lambda: bundle.lnt.lambda,
            seed: bundle.lnt.seed,
            subsets: bundle.lnt.subsets.clone(),
            weights,
            intercepts: "lnt.intercepts".to_string(),
        },
        blobs: blob.index().clone(),
    };
    blob.write(&dir.join(format!("{stem}.bin")))?;
    write_json(&dir.join(format!("{stem}.json")), &descriptor)
}

pub fn load_stage1_bundle(dir: &Path, stem: &str) -> Result<Stage1Bundle> {
    let json_path = dir.join(format!("{stem}.json"));
    let descriptor: Stage1Descriptor = read_json(&json_path)?;
    if descriptor.format != STAGE1_FORMAT {
        return Err(PipelineError::InvalidInput(format!(
            "{}: unsupported model format {:?} (expected {STAGE1_FORMAT:?})",
            json_path.display(),
            descriptor.format
        )));
    }
    let blob = BlobReader::open(&dir.join(&descriptor.blob_file), descriptor.blobs.clone())?;
    let hop1 = get_saab(&blob, &descriptor.radhop.hop1)?;
    let hop2 = descriptor
        .radhop
        .hop2
        .iter()
        .map(|d| get_saab(&blob, d))
        .collect::<Result<Vec<_>>>()?;
    let selector = FeatureSelector {
        scores: blob.get(&descriptor.selector_scores)?,
        kept_indices: descriptor.selector_kept.clone(),
    };
    let weights = descriptor
        .lnt
        .weights
        .iter()
        .map(|n| blob.get(n))
        .collect::<Result<Vec<_>>>()?;
    let lnt = LntProjector {
        in_dim: descriptor.lnt.in_dim,
        subsets: descriptor.lnt.subsets.clone(),
        weights,
        intercepts: blob.get(&descriptor.lnt.intercepts)?,
        lambda: descriptor.lnt.lambda,
        seed: descriptor.lnt.seed,
    };
    Ok(Stage1Bundle {
        modality: descriptor.modality,
        radhop: RadHopModel {
            window: descriptor.radhop.window,
            energy_threshold: descriptor.radhop.energy_threshold,
            hop1,
            hop2,
            f_raw: descriptor.radhop.f_raw,
        },
        selector,
        lnt,
    })
}

#[derive(Serialize, Deserialize)]
struct NetDescriptor {
    format: String,
    blob_file: String,
    in_channels: usize,
    grid: usize,
    layers: Vec<LayerSpec>,
    params: String,
    blobs: BTreeMap<String, (usize, usize)>,
}

pub fn save_network(dir: &Path, stem: &str, net: &Network) -> Result<()> {
    let (in_channels, grid) = match net.shapes[0] {
        Shape::Map { c, h, .. } => (c, h),
        Shape::Flat { d } => (d, 1),
    };
    let mut blob = BlobWriter::default();
    blob.put("params", &net.params);
    let descriptor = NetDescriptor {
        format: NET_FORMAT.to_string(),
        blob_file: format!("{stem}.bin"),
        in_channels,
        grid,
        layers: net.layers.clone(),
        params: "params".to_string(),
        blobs: blob.index().clone(),
    };
    blob.write(&dir.join(format!("{stem}.bin")))?;
    write_json(&dir.join(format!("{stem}.json")), &descriptor)
}

pub fn load_network(dir: &Path, stem: &str) -> Result<Network> {
    let json_path = dir.join(format!("{stem}.json"));
    let descriptor: NetDescriptor = read_json(&json_path)?;
    if descriptor.format != NET_FORMAT {
        return Err(PipelineError::InvalidInput(format!(
            "{}: unsupported network format {:?} (expected {NET_FORMAT:?})",
            json_path.display(),
            descriptor.format
        )));
    }
    let blob = BlobReader::open(&dir.join(&descriptor.blob_file), descriptor.blobs.clone())?;
    let mut net = Network::new(
        descriptor.layers,
        Shape::Map {
            c: descriptor.in_channels,
            h: descriptor.grid,
            w: descriptor.grid,
        },
        0,
    );
    let params = blob.get(&descriptor.params)?;
    if params.len() != net.param_count() {
        return Err(PipelineError::InvalidInput(format!(
            "network blob has {} parameters, architecture needs {}",
            params.len(),
            net.param_count()
        )));
    }
    net.params = params;
    Ok(net)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

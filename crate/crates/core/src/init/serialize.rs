//! Adapter-set serialization: one binary file per run with every layer's
//! shapes, rank, scaling, method metadata, rescale report, and both factor
//! matrices as little-endian doubles, plus a JSON sidecar manifest listing
//! layer order and per-layer checksums.

use super::{AdapterPair, InitMethod, RescaleReport};
use crate::error::{Result, SliceError};
use crate::linalg::DenseMatrix;
use crate::model::AdapterSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"SLAD";
const VERSION: u32 = 1;

/// In-memory form of one serialized adapter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSetFile {
    pub method: InitMethod,
    pub pairs: AdapterSet,
    pub rescale_reports: BTreeMap<usize, RescaleReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerManifestEntry {
    pub layer: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub scaling: f64,
    /// SHA-256 over the layer's B then A factor bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    method: String,
    data_file: String,
    layers: Vec<LayerManifestEntry>,
}

/// `adapters.bin` -> `adapters.manifest.json`, next to the data file.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let stem = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "adapters".into());
    data_path.with_file_name(format!("{stem}.manifest.json"))
}

fn matrix_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.entries().len() * 8);
    for v in m.entries() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn layer_checksum(pair: &AdapterPair) -> String {
    let mut hasher = Sha256::new();
    hasher.update(matrix_bytes(&pair.b));
    hasher.update(matrix_bytes(&pair.a));
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Write the adapter set and its sidecar manifest; returns the manifest path.
pub fn save_adapter_set(data_path: &Path, set: &AdapterSetFile) -> Result<PathBuf> {
    let display = data_path.display().to_string();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let method_json =
        serde_json::to_vec(&set.method).map_err(|e| SliceError::malformed(&display, e.to_string()))?;
    buf.extend_from_slice(&(method_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&method_json);
    buf.extend_from_slice(&(set.pairs.len() as u32).to_le_bytes());

    let mut entries = Vec::with_capacity(set.pairs.len());
    for (idx, pair) in &set.pairs {
        buf.extend_from_slice(&(*idx as u32).to_le_bytes());
        buf.extend_from_slice(&(pair.d_out() as u32).to_le_bytes());
        buf.extend_from_slice(&(pair.d_in() as u32).to_le_bytes());
        buf.extend_from_slice(&(pair.rank as u32).to_le_bytes());
        buf.extend_from_slice(&pair.scaling.to_le_bytes());
        match set.rescale_reports.get(idx) {
            None => buf.push(0),
            Some(report) => {
                buf.push(1);
                buf.extend_from_slice(&report.sigma_w_sq.to_le_bytes());
                buf.extend_from_slice(&report.sigma_ba_sq.to_le_bytes());
                buf.extend_from_slice(&report.eta_var.to_le_bytes());
                buf.extend_from_slice(&report.eta_r.to_le_bytes());
                buf.extend_from_slice(&(report.m as u64).to_le_bytes());
                buf.extend_from_slice(&report.beta.to_le_bytes());
            }
        }
        buf.extend_from_slice(&matrix_bytes(&pair.b));
        buf.extend_from_slice(&matrix_bytes(&pair.a));
        entries.push(LayerManifestEntry {
            layer: *idx,
            d_out: pair.d_out(),
            d_in: pair.d_in(),
            rank: pair.rank,
            scaling: pair.scaling,
            checksum: layer_checksum(pair),
        });
    }

    let mut file =
        std::fs::File::create(data_path).map_err(|e| SliceError::io(&display, e))?;
    file.write_all(&buf).map_err(|e| SliceError::io(&display, e))?;

    let manifest = Manifest {
        format: "adapter-set".into(),
        version: VERSION,
        method: set.method.name(),
        data_file: data_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        layers: entries,
    };
    let m_path = manifest_path(data_path);
    let m_display = m_path.display().to_string();
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SliceError::malformed(&m_display, e.to_string()))?;
    std::fs::write(&m_path, json).map_err(|e| SliceError::io(&m_display, e))?;
    Ok(m_path)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(SliceError::malformed(self.path, "unexpected end of file"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let raw = self.take(rows * cols * 8)?;
        let entries = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseMatrix::new(rows, cols, entries)
    }
}

/// Read an adapter set, validating layer checksums against the manifest.
pub fn load_adapter_set(data_path: &Path) -> Result<AdapterSetFile> {
    let display = data_path.display().to_string();
    let mut raw = Vec::new();
    std::fs::File::open(data_path)
        .map_err(|e| SliceError::io(&display, e))?
        .read_to_end(&mut raw)
        .map_err(|e| SliceError::io(&display, e))?;

    let mut cur = Cursor {
        data: &raw,
        pos: 0,
        path: &display,
    };
    if cur.take(4)? != MAGIC {
        return Err(SliceError::malformed(&display, "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(SliceError::malformed(
            &display,
            format!("unsupported version {version}"),
        ));
    }
    let method_len = cur.u32()? as usize;
    let method: InitMethod = serde_json::from_slice(cur.take(method_len)?)
        .map_err(|e| SliceError::malformed(&display, format!("method metadata: {e}")))?;
    let layer_count = cur.u32()? as usize;

    let mut pairs = AdapterSet::new();
    let mut rescale_reports = BTreeMap::new();
    for _ in 0..layer_count {
        let idx = cur.u32()? as usize;
        let d_out = cur.u32()? as usize;
        let d_in = cur.u32()? as usize;
        let rank = cur.u32()? as usize;
        let scaling = cur.f64()?;
        if cur.u8()? == 1 {
            rescale_reports.insert(
                idx,
                RescaleReport {
                    sigma_w_sq: cur.f64()?,
                    sigma_ba_sq: cur.f64()?,
                    eta_var: cur.f64()?,
                    eta_r: cur.f64()?,
                    m: cur.u64()? as usize,
                    beta: cur.f64()?,
                },
            );
        }
        let b = cur.matrix(d_out, rank)?;
        let a = cur.matrix(rank, d_in)?;
        pairs.insert(idx, AdapterPair::new(b, a, rank, scaling)?);
    }

    // Cross-check against the sidecar manifest when present.
    let m_path = manifest_path(data_path);
    if m_path.exists() {
        let m_display = m_path.display().to_string();
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(&m_path).map_err(|e| SliceError::io(&m_display, e))?,
        )
        .map_err(|e| SliceError::malformed(&m_display, e.to_string()))?;
        if manifest.layers.len() != pairs.len() {
            return Err(SliceError::malformed(
                &m_display,
                format!(
                    "manifest lists {} layers, data file has {}",
                    manifest.layers.len(),
                    pairs.len()
                ),
            ));
        }
        for entry in &manifest.layers {
            let pair = pairs.get(&entry.layer).ok_or_else(|| {
                SliceError::malformed(&m_display, format!("layer {} missing", entry.layer))
            })?;
            let checksum = layer_checksum(pair);
            if checksum != entry.checksum {
                return Err(SliceError::malformed(
                    &m_display,
                    format!("checksum mismatch on layer {}", entry.layer),
                ));
            }
        }
    }

    Ok(AdapterSetFile {
        method,
        pairs,
        rescale_reports,
    })
}

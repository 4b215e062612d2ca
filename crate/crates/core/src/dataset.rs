//! On-disk cohort format.
//!
//! A cohort directory holds `atlas.json`, `patients.jsonl` (one record per
//! patient) and one binary `.fgcm` file per patient and band:
//!
//! ```text
//! "FGCM" | version u16 | V u16 | label length u16 | label UTF-8 | V·V f64, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_multilayer, Band, ConnectivityMatrix, GraphError, PatientSample, RegionAtlas, RewireConfig};

pub const MATRIX_MAGIC: &[u8; 4] = b"FGCM";
pub const MATRIX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_matrix(m: &ConnectivityMatrix) -> Vec<u8> {
    let label = m.band().label().as_bytes();
    let mut out = Vec::with_capacity(10 + label.len() + m.values().len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.size() as u16).to_le_bytes());
    out.extend_from_slice(&(label.len() as u16).to_le_bytes());
    out.extend_from_slice(label);
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<ConnectivityMatrix, String> {
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| "truncated matrix file".to_string());
    if take(0, 4)? != MATRIX_MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(format!("unsupported matrix version {version}"));
    }
    let size = u16::from_le_bytes(take(6, 2)?.try_into().unwrap()) as usize;
    let label_len = u16::from_le_bytes(take(8, 2)?.try_into().unwrap()) as usize;
    let label = std::str::from_utf8(take(10, label_len)?).map_err(|e| e.to_string())?;
    let band: Band = label.parse().map_err(|e: GraphError| e.to_string())?;
    let start = 10 + label_len;
    let body = take(start, size * size * 8)?;
    if bytes.len() != start + size * size * 8 {
        return Err("trailing bytes after matrix".into());
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ConnectivityMatrix::new(band, size, values).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecordFile {
    pub id: String,
    pub hospital: String,
    pub label: i64,
    pub matrices: BTreeMap<Band, String>,
}

/// One patient with its per-band matrices loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub hospital: String,
    pub label: u8,
    pub matrices: BTreeMap<Band, ConnectivityMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub atlas: RegionAtlas,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let atlas_path = dir.join("atlas.json");
        let atlas_text = fs::read_to_string(&atlas_path).map_err(io_err(&atlas_path))?;
        let atlas: RegionAtlas = serde_json::from_str(&atlas_text).map_err(|e| DatasetError::Format {
            path: atlas_path.clone(),
            detail: e.to_string(),
        })?;
        let list_path = dir.join("patients.jsonl");
        let list = fs::read_to_string(&list_path).map_err(io_err(&list_path))?;
        let mut patients = Vec::new();
        for (lineno, line) in list.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: PatientRecordFile = serde_json::from_str(line).map_err(|e| DatasetError::Format {
                path: list_path.clone(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
            if !(1..=42).contains(&rec.label) {
                return Err(GraphError::InvalidLabel(rec.label).into());
            }
            let mut matrices = BTreeMap::new();
            for (band, rel) in &rec.matrices {
                let path = dir.join(rel);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let m = decode_matrix(&bytes).map_err(|detail| DatasetError::Format {
                    path: path.clone(),
                    detail,
                })?;
                if m.band() != *band || m.size() != atlas.len() {
                    return Err(DatasetError::Format {
                        path,
                        detail: format!("expected a {band} matrix over {} regions", atlas.len()),
                    });
                }
                matrices.insert(*band, m);
            }
            patients.push(PatientRecord {
                id: rec.id,
                hospital: rec.hospital,
                label: rec.label as u8,
                matrices,
            });
        }
        Ok(Self { atlas, patients })
    }

    /// Write into `dir`, which must not exist or be empty.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mdir = dir.join("matrices");
        fs::create_dir_all(&mdir).map_err(io_err(&mdir))?;
        let atlas_path = dir.join("atlas.json");
        let atlas_json = serde_json::to_string_pretty(&self.atlas).expect("atlas serialises");
        fs::write(&atlas_path, atlas_json + "\n").map_err(io_err(&atlas_path))?;
        let mut lines = String::new();
        for p in &self.patients {
            let mut refs = BTreeMap::new();
            for (band, m) in &p.matrices {
                let rel = format!("matrices/{}_{}.fgcm", p.id, band.label());
                let path = dir.join(&rel);
                fs::write(&path, encode_matrix(m)).map_err(io_err(&path))?;
                refs.insert(*band, rel);
            }
            let rec = PatientRecordFile {
                id: p.id.clone(),
                hospital: p.hospital.clone(),
                label: i64::from(p.label),
                matrices: refs,
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            lines.push('\n');
        }
        let list_path = dir.join("patients.jsonl");
        fs::write(&list_path, lines).map_err(io_err(&list_path))?;
        Ok(())
    }

    /// Rewire every patient into a multilayer sample.
    pub fn samples(&self, config: &RewireConfig) -> Result<Vec<PatientSample>> {
        self.patients
            .iter()
            .map(|p| {
                let graph = build_multilayer(&p.matrices, &self.atlas, config)?;
                Ok(PatientSample::new(&p.id, &p.hospital, i64::from(p.label), graph)?)
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.patients.iter().map(|p| p.label).collect()
    }
}

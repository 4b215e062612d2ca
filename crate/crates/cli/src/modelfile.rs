//! Trained-model files.
//!
//! Layout, all integers little-endian:
//! `"FGMD"`, version u16, header length u32, header JSON, parameter count
//! u64, then the parameters as f64. The header carries the model and graph
//! configuration needed to rebuild inputs, and a SHA-256 of the parameter
//! bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use fedgnn::graph::RewireConfig;
use fedgnn::model::{ModelConfig, ModelParameters};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 4] = b"FGMD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub model: ModelConfig,
    pub graph: RewireConfig,
    /// Free-form origin, e.g. `fedavg/seed-0`.
    pub label: String,
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub params: Vec<f64>,
}

pub fn params_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl ModelFile {
    pub fn new(model: ModelConfig, graph: RewireConfig, label: impl Into<String>, params: Vec<f64>) -> Self {
        Self {
            header: ModelHeader {
                model,
                graph,
                label: label.into(),
                params_sha256: params_hash(&params),
            },
            params,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(18 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 10 && &bytes[..4] == MAGIC, "not a model file");
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        ensure!(version == VERSION, "unsupported model file version {version}");
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let rest = &bytes[10..];
        ensure!(rest.len() >= hlen + 8, "truncated model file");
        let header: ModelHeader = serde_json::from_slice(&rest[..hlen]).context("model file header")?;
        let count = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().unwrap()) as usize;
        let body = &rest[hlen + 8..];
        ensure!(body.len() == count * 8, "model file holds {} bytes of parameters, expected {}", body.len(), count * 8);
        let params: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if params.len() != header.model.parameter_count() {
            bail!("model file has {} parameters but its configuration needs {}", params.len(), header.model.parameter_count());
        }
        if params_hash(&params) != header.params_sha256 {
            bail!("model file parameters do not match their checksum");
        }
        Ok(Self { header, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&bytes).with_context(|| path.display().to_string())
    }

    pub fn parameters(&self) -> Result<ModelParameters> {
        Ok(ModelParameters::unflatten(&self.header.model, &self.params)?)
    }
}

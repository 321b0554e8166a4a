//! Self-describing checkpoint container: JSON header with a parameter
//! manifest, raw f32 blobs, and a content hash verified on load.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};
use crate::scalar::Scalar;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable hash of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

const MAGIC: &[u8; 8] = b"RDCK0001";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    params: Vec<ParamEntry>,
    blob_sha256: String,
}

pub fn save_checkpoint<F: Scalar, M: Parameterized<F>>(
    path: &Path,
    config: &serde_json::Value,
    model: &mut M,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.visit_params(&mut |p: &mut Param<F>| {
        let offset = blob.len() / 4;
        for v in p.value.iter() {
            blob.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
        }
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: p.value.len(),
        });
    });
    let header = Header {
        config: config.clone(),
        params: entries,
        blob_sha256: sha256_hex(&blob),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut file = File::create(&tmp)?;
        file.write_all(MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        file.write_all(&blob)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads the container, verifying the blob hash. Returns the stored config
/// and the named parameter tensors.
pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if sha256_hex(&blob) != header.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "content hash mismatch in {}",
            path.display()
        )));
    }
    let mut params = Vec::new();
    for entry in header.params {
        let mut values = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let at = (entry.offset + i) * 4;
            values.push(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()));
        }
        params.push((entry.name, entry.shape, values));
    }
    Ok((header.config, params))
}

/// Restores parameters into a model by name; every model parameter must be
/// present with a matching shape.
pub fn load_into<F: Scalar, M: Parameterized<F>>(
    path: &Path,
    model: &mut M,
) -> Result<serde_json::Value> {
    let (config, params) = read_checkpoint(path)?;
    let by_name: std::collections::HashMap<_, _> = params
        .into_iter()
        .map(|(name, shape, values)| (name, (shape, values)))
        .collect();
    let mut missing = Vec::new();
    model.visit_params(&mut |p: &mut Param<F>| {
        match by_name.get(&p.name) {
            Some((shape, values)) if shape == &p.value.shape().to_vec() => {
                for (dst, src) in p.value.iter_mut().zip(values.iter()) {
                    *dst = crate::scalar::c(*src as f64);
                }
            }
            _ => missing.push(p.name.clone()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing or mismatched parameters: {missing:?}"
        )));
    }
    Ok(config)
}

//! Checkpoint format: b"CDCKPT01" magic, u64 LE header length, a JSON
//! header (network config plus a parameter table with element offsets),
//! then all parameter values as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Network, NetworkConfig};
use crate::error::{data_err, Result};

pub const MAGIC: &[u8; 8] = b"CDCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the f64 payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for p in net.params() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.data.len(),
        });
        offset += p.data.len();
    }
    let header = serde_json::to_vec(&Header {
        config: net.config.clone(),
        params: entries,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + offset * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in net.params() {
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return data_err(format!("checkpoint {}: too short", path.display()));
    }
    if &bytes[..8] != MAGIC {
        return data_err(format!(
            "checkpoint {}: bad magic (not a CDCKPT01 file)",
            path.display()
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len());
    let Some(payload_start) = payload_start else {
        return data_err(format!(
            "checkpoint {}: header length {} exceeds file size",
            path.display(),
            header_len
        ));
    };
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return data_err(format!(
            "checkpoint {}: payload is not a whole number of f64 values",
            path.display()
        ));
    }
    let n_values = payload.len() / 8;

    let mut net = Network::new(header.config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    let have: Vec<&str> = header.params.iter().map(|e| e.name.as_str()).collect();
    let missing: Vec<&str> = expected
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| !have.contains(n))
        .collect();
    let unexpected: Vec<&str> = have
        .iter()
        .filter(|n| !expected.iter().any(|(e, _)| e == *n))
        .copied()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return data_err(format!(
            "checkpoint {}: parameter keys do not match the config; missing {:?}, unexpected {:?}",
            path.display(),
            missing,
            unexpected
        ));
    }

    let total: usize = header.params.iter().map(|e| e.len).sum();
    if total != n_values {
        return data_err(format!(
            "checkpoint {}: payload has {} values, parameter table needs {}",
            path.display(),
            n_values,
            total
        ));
    }
    for e in &header.params {
        let (_, want_shape) = expected.iter().find(|(n, _)| *n == e.name).unwrap();
        if want_shape != &e.shape {
            return data_err(format!(
                "checkpoint {}: parameter '{}' has shape {:?}, config needs {:?}",
                path.display(),
                e.name,
                e.shape,
                want_shape
            ));
        }
        if e.shape.iter().product::<usize>() != e.len {
            return data_err(format!(
                "checkpoint {}: parameter '{}' length {} does not match its shape",
                path.display(),
                e.name,
                e.len
            ));
        }
        let Some(end) = e.offset.checked_add(e.len).filter(|&x| x <= n_values) else {
            return data_err(format!(
                "checkpoint {}: parameter '{}' overruns the payload",
                path.display(),
                e.name
            ));
        };
        let mut data = Vec::with_capacity(e.len);
        for i in e.offset..end {
            data.push(f64::from_le_bytes(
                payload[i * 8..(i + 1) * 8].try_into().unwrap(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return data_err(format!(
                "checkpoint {}: parameter '{}' holds non-finite values",
                path.display(),
                e.name
            ));
        }
        net.set_param(&e.name, &data)?;
    }
    Ok(net)
}

//! Shared binary container layout for checkpoints and feature files: a
//! 5-byte magic, a little-endian u32 header length, a JSON header, then a
//! payload of little-endian f64 values.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::report::atomic_write;
use crate::validation;

pub(crate) fn write_container(
    path: &Path,
    magic: &[u8; 5],
    header: &impl Serialize,
    payload: &[f64],
) -> anyhow::Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(9 + header.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &out)
}

pub(crate) fn read_container<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 5],
) -> anyhow::Result<(H, Vec<f64>)> {
    let buf =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let tag = std::str::from_utf8(magic).unwrap();
    if buf.len() < 9 {
        return Err(validation(format!("{}: truncated {tag} file", path.display())));
    }
    if &buf[0..5] != magic {
        return Err(validation(format!(
            "{}: bad magic, expected version {tag}",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let payload_at = 9 + header_len;
    if buf.len() < payload_at || (buf.len() - payload_at) % 8 != 0 {
        return Err(validation(format!("{}: truncated {tag} file", path.display())));
    }
    let header: H = serde_json::from_slice(&buf[9..payload_at])
        .with_context(|| format!("{}: malformed {tag} header", path.display()))
        .map_err(|e| validation(format!("{e:#}")))?;
    let payload = buf[payload_at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

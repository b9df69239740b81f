//! Model file layout:
//!
//! ```text
//! "SEERNET1" | u32 LE header length | JSON header | f64 LE parameters | u32 LE CRC32
//! ```
//!
//! The trailing CRC32 covers every preceding byte.
//!
//! The header holds the format version, the model config, and the name and length of
//! each parameter group. Groups follow in this order: for each embedding layer `l`,
//! `embed_w{l}` (embed × in, row-major) then `embed_b{l}`; then `cell_w`
//! (gates·hidden × embed), `cell_u` (gates·hidden × hidden), `cell_b` (empty for GRU),
//! `out_w` (classes × hidden), `out_b`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Params, RnnConfig, RnnModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"SEERNET1";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: RnnConfig,
    groups: Vec<(String, usize)>,
}

pub fn save_model(model: &RnnModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_model(model: &RnnModel, w: &mut dyn Write) -> Result<()> {
    let groups = model.params.groups();
    let header =
        Header { version: MODEL_VERSION, config: model.config.clone(), groups: groups.iter().map(|(n, g)| (n.clone(), g.len())).collect() };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * model.params.len());
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, g) in groups {
        for v in g {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RnnModel> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_model(&bytes)
}

pub fn read_model(bytes: &[u8]) -> Result<RnnModel> {
    if bytes.len() < 16 {
        return Err(Error::format(0, "file too short for a model header"));
    }
    if &bytes[..8] != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, not a model file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(Error::format(12, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(12, format!("header: {e}")))?;
    if header.version != MODEL_VERSION {
        return Err(Error::format(12, format!("unsupported model version {}", header.version)));
    }
    header.config.validate()?;
    let mut params = Params::zeros(&header.config);
    let expected: Vec<(String, usize)> = params.groups().iter().map(|(n, g)| (n.clone(), g.len())).collect();
    if expected != header.groups {
        return Err(Error::format(12, "parameter groups do not match the config"));
    }
    let total: usize = expected.iter().map(|(_, n)| n).sum();
    if bytes.len() != body + 8 * total + 4 {
        return Err(Error::format(
            bytes.len() as u64,
            format!("expected {} parameter and checksum bytes, found {}", 8 * total + 4, bytes.len().saturating_sub(body)),
        ));
    }
    let end = body + 8 * total;
    let stored = u32::from_le_bytes(bytes[end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..end]) != stored {
        return Err(Error::format(end as u64, "checksum mismatch"));
    }
    let mut chunks = bytes[body..end].chunks_exact(8);
    for g in params.groups_mut() {
        for v in g.iter_mut() {
            *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    if !params.all_finite() {
        return Err(Error::format(body as u64, "non-finite parameter"));
    }
    Ok(RnnModel { config: header.config, params })
}

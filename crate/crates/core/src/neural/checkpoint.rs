//! Checkpoint layout: 16-byte magic, little-endian u32 version, little-endian
//! u32 header length, JSON header, then every parameter as a little-endian f64
//! in [`Mlp::params`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Mlp};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"FLOWPROXMLPCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    layer_dims: Vec<usize>,
    activation: Activation,
    n_params: usize,
}

pub fn write_checkpoint(model: &Mlp) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        layer_dims: model.layer_dims().to_vec(),
        activation: model.activation(),
        n_params: model.n_params(),
    })
    .expect("header serialises");
    let mut out = Vec::with_capacity(24 + header.len() + 8 * model.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| Error::Format {
        offset: bytes.len(),
        message: format!("truncated {what}: need {n} bytes at offset {at}"),
    })
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Mlp> {
    if take(bytes, 0, 16, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a flowprox checkpoint (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, 16, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(take(bytes, 20, 4, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(bytes, 24, header_len, "header")?).map_err(|e| Error::Format {
        offset: 24 + e.column().saturating_sub(1),
        message: format!("bad header: {e}"),
    })?;
    let mut model = Mlp::zeros(&header.layer_dims, header.activation)?;
    if model.n_params() != header.n_params {
        return Err(Error::Format {
            offset: 24,
            message: format!(
                "header declares {} parameters but the layer dims imply {}",
                header.n_params,
                model.n_params()
            ),
        });
    }
    let start = 24 + header_len;
    let block = take(bytes, start, 8 * header.n_params, "parameter block")?;
    if bytes.len() != start + block.len() {
        return Err(Error::Format {
            offset: start + block.len(),
            message: format!("{} trailing bytes", bytes.len() - start - block.len()),
        });
    }
    let params: Vec<f64> = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Format {
            offset: start + 8 * i,
            message: "non-finite parameter".into(),
        });
    }
    model.set_params(&params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Mlp> {
    read_checkpoint(&fs::read(path)?)
}

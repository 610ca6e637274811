//! Checkpoint layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "ACFLPRM1"
//! layers   u32      number of layer widths
//! widths   u32 * layers
//! count    u64      number of parameters
//! values   f64 * count (IEEE-754)
//! ```

use super::{ModelParams, ModelShape};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACFLPRM1";

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let layers = params.shape().layers();
    let mut out = Vec::with_capacity(8 + 4 + 4 * layers.len() + 8 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for &w in layers {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated: need {n} bytes, have {}", bytes.len())));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u32_le(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub fn decode_params(mut bytes: &[u8]) -> Result<ModelParams> {
    let b = &mut bytes;
    if take(b, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let n_layers = u32_le(b)? as usize;
    if n_layers > b.len() / 4 {
        return Err(Error::Format(format!("checkpoint declares {n_layers} layers")));
    }
    let layers = (0..n_layers).map(|_| u32_le(b).map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let shape = ModelShape::new(layers).map_err(|e| Error::Format(e.to_string()))?;
    let count = u64::from_le_bytes(take(b, 8)?.try_into().unwrap());
    // Compare against the remaining payload first so a corrupt count never drives an allocation.
    if count.checked_mul(8) != Some(b.len() as u64) {
        return Err(Error::Format(format!("{count} values declared, {} payload bytes", b.len())));
    }
    let count = count as usize;
    if count != shape.param_count() {
        return Err(Error::Consistency(format!(
            "{count} values for a shape with {} parameters",
            shape.param_count()
        )));
    }
    let values = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ModelParams::from_values(shape, values).map_err(|e| Error::Format(e.to_string()))
}

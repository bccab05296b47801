//! Binary head checkpoints.
//!
//! Little-endian: magic "FEDH", u16 version 1, five u32 dims (d_in, d_model,
//! d_ff, n_layers, n_classes), then every tensor as f64 in canonical order.

use std::fs;
use std::path::Path;

use super::OrchestratorError;
use crate::nnkernel::{HeadDims, HeadParams};

const MAGIC: [u8; 4] = *b"FEDH";
const VERSION: u16 = 1;

pub fn encode_params(p: &HeadParams) -> Vec<u8> {
    let d = p.dims();
    let mut out = Vec::with_capacity(26 + 8 * p.param_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d.d_in, d.d_model, d.d_ff, d.n_layers, d.n_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in p.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(buf: &[u8]) -> Result<HeadParams, OrchestratorError> {
    let bad = |m: &str| OrchestratorError::Model(m.to_string());
    if buf.len() < 26 || buf[..4] != MAGIC {
        return Err(bad("not a FEDH checkpoint"));
    }
    if u16::from_le_bytes([buf[4], buf[5]]) != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let dim = |i: usize| {
        let o = 6 + 4 * i;
        u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let dims = HeadDims {
        d_in: dim(0),
        d_model: dim(1),
        d_ff: dim(2),
        n_layers: dim(3),
        n_classes: dim(4),
    };
    if buf.len() != 26 + 8 * dims.param_count() {
        return Err(bad("checkpoint length does not match its dimensions"));
    }
    let mut p = HeadParams::zeros(dims);
    let mut values = buf[26..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(p)
}

pub fn save_params(p: &HeadParams, path: &Path) -> Result<(), OrchestratorError> {
    fs::write(path, encode_params(p))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<HeadParams, OrchestratorError> {
    decode_params(&fs::read(path)?)
}

//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `LSCDECKP` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `h` (`u64`) |
//! | h | UTF-8 JSON header: model config, dimensions, treatment marginal, parameter names and shapes in store order |
//! | 8·n | every parameter value as `f64`, in header order, row-major |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"LSCDECKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    covariate_dim: usize,
    treatment_dim: usize,
    marginal: Vec<f64>,
    zero_confounders: bool,
    params: Vec<(String, Vec<usize>)>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.cfg.clone(),
        covariate_dim: model.covariate_dim,
        treatment_dim: model.treatment_dim,
        marginal: model.marginal.clone(),
        zero_confounders: model.zero_confounders,
        params: model.store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Parse("checkpoint truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Model> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;
    let mut model = Model::new(header.config, header.covariate_dim, header.treatment_dim, 0)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Parse("checkpoint parameter list does not match the model".into()));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, (name, shape)) in ids.into_iter().zip(&header.params) {
        let p = model.store.get_mut(id);
        if &p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Parse(format!("checkpoint parameter {name} does not match the model")));
        }
        for v in p.value.data_mut() {
            *v = f64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    model.marginal = header.marginal;
    model.zero_confounders = header.zero_confounders;
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

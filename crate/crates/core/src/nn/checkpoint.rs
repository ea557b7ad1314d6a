//! Binary checkpoint container.
//!
//! Layout: the magic line `DERMASEG-CKPT 1\n`, a little-endian `u64` header
//! length, a JSON header (model kind, model config, parameter and buffer
//! names/shapes, optimiser step), then the raw little-endian `f32` payload:
//! parameters, buffers and, when present, the Adam moment estimates.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"DERMASEG-CKPT 1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, usize)>,
    adam_step: Option<u64>,
}

pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub store: ParamStore,
    pub adam: Option<Adam>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    for &x in v {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

pub fn save(path: &Path, kind: &str, config: &impl Serialize, store: &ParamStore, adam: Option<&Adam>) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| ck(e.to_string()))?,
        params: store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect(),
        buffers: store
            .buffers()
            .iter()
            .map(|b| (b.name.clone(), b.value.len()))
            .collect(),
        adam_step: adam.map(|a| a.step),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| ck(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u64::<LittleEndian>(hjson.len() as u64).map_err(io)?;
    w.write_all(&hjson).map_err(io)?;
    for p in store.params() {
        write_f32s(&mut w, &p.value).map_err(io)?;
    }
    for b in store.buffers() {
        write_f32s(&mut w, &b.value).map_err(io)?;
    }
    if let Some(a) = adam {
        for m in a.m.iter().chain(&a.v) {
            write_f32s(&mut w, m).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint and copies its tensors into `template`, which must have
/// been built from the same config (names and shapes are checked).
pub fn load_into(path: &Path, kind: &str, template: &mut ParamStore) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(ck(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| ck(e.to_string()))?;
    if header.kind != kind {
        return Err(ck(format!("expected a `{kind}` checkpoint, found `{}`", header.kind)));
    }
    if header.params.len() != template.params.len() || header.buffers.len() != template.buffers.len() {
        return Err(ck("parameter layout differs from the model config"));
    }
    for ((name, shape), p) in header.params.iter().zip(template.params.iter_mut()) {
        if *name != p.name || *shape != p.shape {
            return Err(ck(format!(
                "parameter `{name}` {shape:?} does not match `{}` {:?}",
                p.name, p.shape
            )));
        }
        p.value = read_f32s(&mut r, p.value.len()).map_err(io)?;
    }
    for ((name, len), b) in header.buffers.iter().zip(template.buffers.iter_mut()) {
        if *name != b.name || *len != b.value.len() {
            return Err(ck(format!("buffer `{name}` does not match `{}`", b.name)));
        }
        b.value = read_f32s(&mut r, *len).map_err(io)?;
    }
    let adam = match header.adam_step {
        Some(step) => {
            let mut a = Adam::new(template);
            a.step = step;
            for m in a.m.iter_mut() {
                *m = read_f32s(&mut r, m.len()).map_err(io)?;
            }
            for v in a.v.iter_mut() {
                *v = read_f32s(&mut r, v.len()).map_err(io)?;
            }
            Some(a)
        }
        None => None,
    };
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        store: template.clone(),
        adam,
    })
}

/// Reads only the header's config without touching the payload.
pub fn read_config(path: &Path) -> Result<(String, serde_json::Value)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(ck(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| ck(e.to_string()))?;
    Ok((header.kind, header.config))
}

//! Checkpoints: a flat little-endian file of named tensors.
//!
//! ```text
//! magic     8 bytes   "HLABCKPT"
//! version   u32       1
//! meta_len  u64
//! meta      JSON      {"config": …, "layout": "<layout text>", "extra": {…}}
//! count     u64
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × numel }
//! ```
//!
//! Parameters are stored under their registered names; router state of
//! MoE layers under `routers.{i}.expert_bias` and `routers.{i}.load_counts`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HLABCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    layout: String,
    extra: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Contract(format!("malformed checkpoint: {}", msg.into()))
}

pub fn write_checkpoint(model: &Model, extra: &BTreeMap<String, String>, w: &mut impl Write) -> Result<()> {
    if !model.store.is_materialized() {
        return Err(Error::Contract("cannot checkpoint a shape-only model".into()));
    }
    let meta = Meta { config: model.cfg.clone(), layout: model.layout.to_string(), extra: extra.clone() };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Contract(e.to_string()))?;
    let mut tensors: Vec<(String, Tensor)> =
        model.store.specs().iter().zip(model.store.values()).map(|(s, v)| (s.name.clone(), v.clone())).collect();
    for (i, r) in model.routers.iter().enumerate() {
        if let Some(r) = r {
            let n = r.expert_bias.len();
            tensors.push((format!("routers.{i}.expert_bias"), Tensor::new(&[n], r.expert_bias.clone())?));
            let counts = r.load_counts.iter().map(|&c| c as f64).collect();
            tensors.push((format!("routers.{i}.load_counts"), Tensor::new(&[n], counts)?));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint back into a model plus its extra metadata.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Model, BTreeMap<String, String>)> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("wrong magic"));
    }
    let v = read_u32(r)?;
    if v != VERSION {
        return Err(bad(format!("unsupported version {v}")));
    }
    let meta_len = read_u64(r)? as usize;
    let mut meta = vec![0; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| bad(e.to_string()))?;
    let layout = meta.layout.parse()?;
    let mut model = Model::new(&meta.config, &layout, 0)?;
    let count = read_u64(r)?;
    let mut seen = vec![false; model.store.len()];
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        let mut name = vec![0; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data)?;
        if let Some(id) = model.store.id(&name) {
            model.store.set(id, t)?;
            seen[id.0] = true;
        } else if let Some(rest) = name.strip_prefix("routers.") {
            let (i, field) = rest.split_once('.').ok_or_else(|| bad(format!("unknown tensor `{name}`")))?;
            let i: usize = i.parse().map_err(|_| bad(format!("unknown tensor `{name}`")))?;
            let state = model.routers.get_mut(i).and_then(Option::as_mut).ok_or_else(|| bad(format!("no router {i}")))?;
            if t.numel() != state.expert_bias.len() {
                return Err(bad(format!("`{name}` has {} entries", t.numel())));
            }
            match field {
                "expert_bias" => state.expert_bias = t.into_data(),
                "load_counts" => state.load_counts = t.data().iter().map(|&c| c as u64).collect(),
                _ => return Err(bad(format!("unknown tensor `{name}`"))),
            }
        } else {
            return Err(bad(format!("unknown tensor `{name}`")));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing tensor `{}`", model.store.specs()[i].name)));
    }
    Ok((model, meta.extra))
}

pub fn save(model: &Model, extra: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, extra, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

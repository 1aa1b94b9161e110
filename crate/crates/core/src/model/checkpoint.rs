//! Model checkpoints.
//!
//! Layout (little-endian): the magic line, a `u64` entry count, then per entry
//! `u64 name_len, name, u8 kind, u64 byte_len, bytes`. Kind 0 is a TT table in
//! its own binary format, kind 1 a raw `f32` tensor and kind 2 the JSON model
//! config, which always comes first.

use std::io::{Read, Write};
use std::path::Path;

use super::{DlrmModel, EmbeddingTable, Linear, Mlp, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tt::{DenseTable, TtTable};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"EFFTTCK1\n";

const KIND_TT: u8 = 0;
const KIND_F32: u8 = 1;
const KIND_CONFIG: u8 = 2;

fn f32_bytes<T: Scalar>(v: &[T]) -> Vec<u8> {
    v.iter().flat_map(|x| (x.as_f64() as f32).to_le_bytes()).collect()
}

fn from_f32_bytes<T: Scalar>(b: &[u8], expect: usize, name: &str) -> Result<Vec<T>> {
    if b.len() != expect * 4 {
        return Err(Error::Format(format!("tensor `{name}` has {} bytes, expected {}", b.len(), expect * 4)));
    }
    Ok(b.chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
        .collect())
}

fn mlp_entries<T: Scalar>(prefix: &str, mlp: &Mlp<T>, out: &mut Vec<(String, u8, Vec<u8>)>) {
    for (k, l) in mlp.layers().iter().enumerate() {
        out.push((format!("{prefix}.{k}.w"), KIND_F32, f32_bytes(&l.w)));
        out.push((format!("{prefix}.{k}.b"), KIND_F32, f32_bytes(&l.b)));
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &DlrmModel<T>, mut w: W) -> Result<()> {
    let mut entries = vec![(
        "config".to_string(),
        KIND_CONFIG,
        serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?,
    )];
    mlp_entries("bottom", model.bottom(), &mut entries);
    for (f, t) in model.tables().iter().enumerate() {
        let name = format!("table.{f}");
        match t {
            EmbeddingTable::Tt(tt) => {
                let mut bytes = Vec::new();
                tt.write_to(&mut bytes)?;
                entries.push((name, KIND_TT, bytes));
            }
            EmbeddingTable::Dense(d) => entries.push((name, KIND_F32, f32_bytes(d.data()))),
            EmbeddingTable::Host { .. } => {
                return Err(Error::InvalidArgument(format!("table {f} is host-resident; restore it before saving")))
            }
        }
    }
    mlp_entries("top", model.top(), &mut entries);

    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, kind, bytes) in &entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[*kind])?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(model: &DlrmModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_ENTRY: u64 = 1 << 34;

fn read_entry<R: Read>(r: &mut R) -> Result<(String, u8, Vec<u8>)> {
    let name_len = read_u64(r)?;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible name length {name_len}")));
    }
    let mut name = vec![0u8; name_len as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not utf-8".into()))?;
    let mut kind = [0u8];
    r.read_exact(&mut kind)?;
    let len = read_u64(r)?;
    if len > MAX_ENTRY {
        return Err(Error::Format(format!("implausible size {len} for `{name}`")));
    }
    let mut bytes = vec![0u8; len as usize];
    r.read_exact(&mut bytes)?;
    Ok((name, kind[0], bytes))
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<DlrmModel<T>> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let count = read_u64(&mut r)?;
    let (name, kind, bytes) = read_entry(&mut r)?;
    if name != "config" || kind != KIND_CONFIG {
        return Err(Error::Format("checkpoint must start with the config".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    config.validate()?;
    let mut entries = std::collections::BTreeMap::new();
    for _ in 1..count {
        let (name, kind, bytes) = read_entry(&mut r)?;
        if entries.insert(name.clone(), (kind, bytes)).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
    }
    let mut take = |name: &str, want: u8| -> Result<Vec<u8>> {
        match entries.remove(name) {
            Some((kind, bytes)) if kind == want => Ok(bytes),
            Some((kind, _)) => Err(Error::Format(format!("entry `{name}` has kind {kind}, expected {want}"))),
            None => Err(Error::Format(format!("missing entry `{name}`"))),
        }
    };
    let mut mlp = |prefix: &str, widths: &[usize]| -> Result<Mlp<T>> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                let wn = format!("{prefix}.{k}.w");
                let bn = format!("{prefix}.{k}.b");
                Ok(Linear {
                    inputs,
                    outputs,
                    w: from_f32_bytes(&take(&wn, KIND_F32)?, inputs * outputs, &wn)?,
                    b: from_f32_bytes(&take(&bn, KIND_F32)?, outputs, &bn)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    };
    let bottom = mlp("bottom", &config.bottom_spec()?.widths)?;
    let top = mlp("top", &config.top_spec()?.widths)?;
    let mut tables = Vec::with_capacity(config.n_sparse());
    for f in 0..config.n_sparse() {
        let name = format!("table.{f}");
        if config.uses_tt(f) {
            let t = TtTable::<f32>::read_from(take(&name, KIND_TT)?.as_slice())?;
            tables.push(EmbeddingTable::Tt(t.convert()));
        } else {
            let rows = config.rows_per_field[f];
            let data = from_f32_bytes(&take(&name, KIND_F32)?, rows * config.embed_dim, &name)?;
            tables.push(EmbeddingTable::Dense(DenseTable::new(rows, config.embed_dim, data)?));
        }
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Format(format!("unexpected entry `{extra}`")));
    }
    DlrmModel::from_parts(config, bottom, top, tables)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<DlrmModel<T>> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

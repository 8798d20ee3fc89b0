//! Binary checkpoint format. See `docs/checkpoint.md` for the layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ToyModel};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MOEL";
pub const VERSION: u32 = 1;

/// JSON header stored in front of the buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub sparse: bool,
    #[serde(default)]
    pub stage: Option<String>,
}

pub fn write_to<W: Write>(mut w: W, model: &ToyModel, stage: Option<&str>) -> Result<()> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        sparse: model.is_sparse(),
        stage: stage.map(str::to_owned),
    };
    let meta = serde_json::to_vec(&meta)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len_u32(meta.len())?.to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&len_u32(model.store.len())?.to_le_bytes())?;
    for entry in model.store.entries() {
        let name = entry.name.as_bytes();
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[entry.group.code()])?;
        let shape = entry.tensor.shape();
        w.write_all(&len_u32(shape.len())?.to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in entry.tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

/// Reads a checkpoint, rebuilding the model skeleton from its header and
/// filling every buffer by name.
pub fn read_from<R: Read>(mut r: R) -> Result<(ToyModel, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&read_bytes(&mut r, meta_len)?)?;
    let mut model = if meta.sparse {
        ToyModel::build(&meta.config, 0)?
    } else {
        ToyModel::build_dense(&meta.config, 0)?
    };
    let count = read_u32(&mut r)? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} buffers, config implies {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Checkpoint("buffer name is not UTF-8".into()))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let group = ParamGroup::from_code(code[0])
            .ok_or_else(|| Error::Checkpoint(format!("unknown group code {}", code[0])))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = read_bytes(&mut r, n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected buffer '{name}'")))?;
        let entry = model.store.entry_mut(id);
        if entry.group != group || entry.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("buffer '{name}' does not match the config")));
        }
        entry.tensor = Tensor::new(shape, values)?;
        seen[id.0] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Checkpoint("checkpoint is missing buffers".into()));
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &ToyModel, stage: Option<&str>) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), model, stage)
}

pub fn load(path: &Path) -> Result<(ToyModel, CheckpointMeta)> {
    read_from(BufReader::new(File::open(path)?))
}

//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                            |
//! |----------------|----------------------------------------------------|
//! | 8              | magic `ATMILCKP`                                   |
//! | 4              | format version (`u32`, currently 1)                |
//! | 4              | header length `H` (`u32`)                          |
//! | H              | UTF-8 JSON header (see [`CheckpointHeader`])       |
//! | 8 * elements   | parameter values as `f64`, parameters in header order |
//!
//! The header lists every parameter with its name, partition and shape, in
//! canonical order, so the payload can be split without the model code.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::network::{EncoderConfig, MilModel};
use crate::autodiff::{ParamSet, Partition, TensorValue};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATMILCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub params: Vec<ParamHeader>,
    /// Free-form run information (strategy, epoch, seed...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn write_checkpoint<W: Write>(
    out: &mut W,
    model: &MilModel,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let header = CheckpointHeader {
        encoder: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(_, p)| ParamHeader {
                name: p.name.clone(),
                partition: p.partition,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    for (_, p) in model.params().iter() {
        for &v in p.value.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(MilModel, BTreeMap<String, String>)> {
    let mut offset = 0u64;
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format(offset, "file too short for checkpoint magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(offset, "not a checkpoint (bad magic)"));
    }
    offset += 8;
    let version = input
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(offset, "truncated version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            offset,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    offset += 4;
    let len = input
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(offset, "truncated header length"))? as usize;
    offset += 4;
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::format(offset, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::format(offset, format!("bad header: {e}")))?;
    offset += len as u64;

    let mut params = ParamSet::new();
    for ph in &header.params {
        let n: usize = ph.shape.iter().product();
        let mut data = vec![0.0; n];
        input
            .read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| Error::format(offset, format!("truncated values for {:?}", ph.name)))?;
        offset += 8 * n as u64;
        params.insert(
            ph.name.clone(),
            ph.partition,
            TensorValue::new(ph.shape.clone(), data)?,
        )?;
    }
    let model = MilModel::from_params(header.encoder, params)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(
    path: &Path,
    model: &MilModel,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MilModel, BTreeMap<String, String>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

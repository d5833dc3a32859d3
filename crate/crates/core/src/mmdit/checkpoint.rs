//! Checkpoint file: `u32` header length, header JSON, then one TNSR record
//! per parameter in declared order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::io::{read_tensor, write_tensor};

use super::{LoraSpec, Model, ModelConfig, VariantTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub variant: VariantTag,
    pub lora: Option<LoraSpec>,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

pub fn save_checkpoint(path: &Path, model: &Model, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        variant: model.variant,
        lora: model.lora.clone(),
        step,
        seed: model.seed,
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for e in model.params.entries() {
        write_tensor(&mut w, &e.tensor)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuild the model structure from the header, then overwrite every
/// tensor with its stored value. Trainability follows the variant.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;

    let base = Model::new_base(header.config.clone(), header.seed)?;
    let mut model = Model::with_variant(&base, header.variant, header.seed)?;
    if header.variant == VariantTag::Base {
        model = base;
    }
    if let Some(spec) = &header.lora {
        model.lora_wrap(spec.rank, &spec.targets)?;
    }
    if model.params.len() != header.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model has {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for (i, rec) in header.params.iter().enumerate() {
        let id = crate::params::ParamId(i);
        let t = read_tensor(&mut r)?;
        let entry = model.params.entry(id);
        if entry.name != rec.name || entry.tensor.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {i}: expected {} {:?}, found {} {:?}",
                entry.name,
                entry.tensor.shape(),
                rec.name,
                t.shape()
            )));
        }
        model.params.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok((model, header))
}

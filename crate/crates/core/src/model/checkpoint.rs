//! Checkpoint directory: `manifest.json` plus one SELDTNSR file per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamSet;
use crate::error::{Result, SeldError};
use crate::numeric::io::{load_tensor, save_tensor};
use crate::numeric::{BatchNormStats, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    momentum: f64,
    eps: f64,
    mean: String,
    var: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    step: u64,
    params: Vec<TensorEntry>,
    buffers: Vec<BufferEntry>,
    aux: Vec<TensorEntry>,
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub params: ParamSet<f32>,
    /// Extra tensors, e.g. optimizer moments.
    pub aux: BTreeMap<String, Tensor<f32>>,
    pub extra: serde_json::Value,
}

fn file_name(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}.bin")
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SeldError::io(dir, e))?;
        let write = |prefix: &str, name: &str, t: &Tensor<f32>| -> Result<TensorEntry> {
            let file = file_name(prefix, name);
            save_tensor(t, &dir.join(&file))?;
            Ok(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), file })
        };
        let params = self
            .params
            .params
            .iter()
            .map(|(k, t)| write("param", k, t))
            .collect::<Result<Vec<_>>>()?;
        let aux = self.aux.iter().map(|(k, t)| write("aux", k, t)).collect::<Result<Vec<_>>>()?;
        let mut buffers = Vec::new();
        for (k, s) in &self.params.buffers {
            let mean = write("buffer", &format!("{k}.mean"), &Tensor::from_vec(vec![s.mean.len()], s.mean.clone()))?;
            let var = write("buffer", &format!("{k}.var"), &Tensor::from_vec(vec![s.var.len()], s.var.clone()))?;
            buffers.push(BufferEntry { name: k.clone(), momentum: s.momentum, eps: s.eps, mean: mean.file, var: var.file });
        }
        let manifest = Manifest {
            model: self.model.clone(),
            step: self.step,
            params,
            buffers,
            aux,
            extra: self.extra.clone(),
        };
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| SeldError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| SeldError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            let t: Tensor<f32> = load_tensor(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(SeldError::dim("checkpoint tensor", t.shape(), &e.shape));
            }
            Ok(t)
        };
        let mut params = ParamSet::new();
        for e in &m.params {
            params.params.insert(e.name.clone(), read(e)?);
        }
        for b in &m.buffers {
            let mean: Tensor<f32> = load_tensor(&dir.join(&b.mean))?;
            let var: Tensor<f32> = load_tensor(&dir.join(&b.var))?;
            params.buffers.insert(
                b.name.clone(),
                BatchNormStats { mean: mean.into_data(), var: var.into_data(), momentum: b.momentum, eps: b.eps },
            );
        }
        let aux = m.aux.iter().map(|e| Ok((e.name.clone(), read(e)?))).collect::<Result<_>>()?;
        Ok(Checkpoint { model: m.model, step: m.step, params, aux, extra: m.extra })
    }
}

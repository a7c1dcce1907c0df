//! Checkpoint file: one JSON header line, then raw little-endian arrays in
//! header order (parameters, running means/variances, optional Adam moments).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::error::{ArlError, Result};
use crate::tensor::{Real, Tensor};
use crate::training::Adam;

use super::{Descriptor, ParameterStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub name: String,
    pub channels: usize,
    pub initialized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub descriptor: Descriptor,
    pub iteration: usize,
    pub params: Vec<TensorEntry>,
    pub stats: Vec<StatsEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub store: ParameterStore<T>,
    pub iteration: usize,
    pub adam: Option<Adam<T>>,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    store: &ParameterStore<T>,
    iteration: usize,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::NAME.into(),
        descriptor: store.descriptor().clone(),
        iteration,
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        stats: store
            .bn_names()
            .iter()
            .zip(store.stats())
            .map(|(n, s)| StatsEntry {
                name: n.clone(),
                channels: s.channels(),
                initialized: s.initialized,
            })
            .collect(),
        optimizer: adam.map(|a| OptimizerEntry {
            step: a.step,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    let mut put = |xs: &[T]| xs.iter().for_each(|x| x.write_le(&mut buf));
    store.tensors().iter().for_each(|t| put(t.data()));
    for s in store.stats() {
        put(&s.mean);
        put(&s.var);
    }
    if let Some(a) = adam {
        a.m.iter().for_each(|m| put(m));
        a.v.iter().for_each(|v| put(v));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Header only, without reading the arrays.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut line = String::new();
    BufReader::new(fs::File::open(path)?).read_line(&mut line)?;
    parse_header(&line)
}

fn parse_header(line: &str) -> Result<CheckpointHeader> {
    let h: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| ArlError::Format(format!("checkpoint header: {}", e)))?;
    if h.format_version != FORMAT_VERSION {
        return Err(ArlError::Format(format!(
            "checkpoint format version {} (expected {})",
            h.format_version, FORMAT_VERSION
        )));
    }
    Ok(h)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ArlError::Format("checkpoint has no header line".into()))?;
    let header = parse_header(std::str::from_utf8(&bytes[..nl]).map_err(|e| ArlError::Format(e.to_string()))?)?;
    if header.dtype != T::NAME {
        return Err(ArlError::Format(format!(
            "checkpoint holds {} data, {} requested",
            header.dtype,
            T::NAME
        )));
    }
    // layout must be exactly what the descriptor declares
    let fresh = ParameterStore::<T>::new(header.descriptor.clone(), 0)?;
    let declared: Vec<(&String, &[usize])> = fresh.names().iter().zip(fresh.tensors().iter().map(|t| t.shape())).collect();
    let stored: Vec<(&String, &[usize])> = header.params.iter().map(|e| (&e.name, e.shape.as_slice())).collect();
    let stats_declared: Vec<(&String, usize)> = fresh.bn_names().iter().zip(fresh.stats().iter().map(|s| s.channels())).collect();
    let stats_stored: Vec<(&String, usize)> = header.stats.iter().map(|e| (&e.name, e.channels)).collect();
    if declared != stored || stats_declared != stats_stored {
        return Err(ArlError::Format("checkpoint tables disagree with its descriptor".into()));
    }

    let mut pos = nl + 1;
    let mut take = |n: usize| -> Result<Vec<T>> {
        let end = pos + n * T::BYTES;
        if end > bytes.len() {
            return Err(ArlError::Format("checkpoint is truncated".into()));
        }
        let out = bytes[pos..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        pos = end;
        Ok(out)
    };
    let mut tensors = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n = e.shape.iter().product();
        tensors.push(Tensor::new(e.shape.clone(), take(n)?)?);
    }
    let mut stats = Vec::with_capacity(header.stats.len());
    for e in &header.stats {
        stats.push(RunningStats {
            mean: take(e.channels)?,
            var: take(e.channels)?,
            initialized: e.initialized,
        });
    }
    let adam = match &header.optimizer {
        Some(o) => {
            let mut a = Adam::new(&tensors);
            a.step = o.step;
            a.beta1 = o.beta1;
            a.beta2 = o.beta2;
            a.eps = o.eps;
            for m in &mut a.m {
                *m = take(m.len())?;
            }
            for v in &mut a.v {
                *v = take(v.len())?;
            }
            Some(a)
        }
        None => None,
    };
    if pos != bytes.len() {
        return Err(ArlError::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    let names = header.params.iter().map(|e| e.name.clone()).collect();
    let bn_names = header.stats.iter().map(|e| e.name.clone()).collect();
    Ok(Checkpoint {
        store: ParameterStore::assemble(header.descriptor, names, tensors, bn_names, stats),
        iteration: header.iteration,
        adam,
    })
}

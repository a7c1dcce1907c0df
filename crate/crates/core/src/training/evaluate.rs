use std::collections::HashMap;

use rayon::prelude::*;

use crate::arlnet::{absolute_heads, dataset_images, encode, relation_pass, Descriptor, Mode, ParameterStore};
use crate::autodiff::Tape;
use crate::data::{sample_episode, Dataset, Split};
use crate::error::{ArlError, Result};
use crate::tensor::{Real, Tensor};

use super::{derive_seed, EvalRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSpec {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean episode accuracy in percent.
    pub acc: f64,
    /// Half-width of the 95% interval, `1.96 * std / sqrt(n)`.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>, way: usize, shot: usize) -> EvalReport {
        let n = per_episode.len().max(1) as f64;
        let acc = per_episode.iter().sum::<f64>() / n;
        let var = per_episode.iter().map(|a| (a - acc).powi(2)).sum::<f64>() / n;
        EvalReport {
            acc,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
            episodes: per_episode.len(),
            per_episode,
            way,
            shot,
        }
    }

    pub fn record(&self) -> EvalRecord {
        EvalRecord {
            acc: self.acc,
            ci95: self.ci95,
            episodes: self.episodes,
            way: self.way,
            shot: self.shot,
        }
    }
}

/// Relation scores of one evaluation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScores {
    pub episode: usize,
    /// Episode-local label of each query.
    pub labels: Vec<usize>,
    /// `scores[q][c]` = ĉ*(class c, query q).
    pub scores: Vec<Vec<f64>>,
}

impl EpisodeScores {
    /// First index of the maximum score.
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .iter()
            .map(|row| {
                let mut best = 0;
                for (c, &s) in row.iter().enumerate() {
                    if s > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let hits = self
            .predictions()
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        100.0 * hits as f64 / self.labels.len() as f64
    }
}

/// Episode accuracies recomputed from dumped scores.
pub fn recount(dump: &[EpisodeScores]) -> Vec<f64> {
    dump.iter()
        .map(|e| {
            let mut hits = 0usize;
            for (row, &label) in e.scores.iter().zip(&e.labels) {
                let mut arg = 0;
                let mut i = 1;
                while i < row.len() {
                    if row[i] > row[arg] {
                        arg = i;
                    }
                    i += 1;
                }
                hits += (arg == label) as usize;
            }
            100.0 * hits as f64 / e.labels.len() as f64
        })
        .collect()
}

/// Checkpoint and dataset must agree on image geometry and, for supervised
/// models with absolute heads, on A and C_train.
pub fn check_compatible(desc: &Descriptor, ds: &Dataset) -> Result<()> {
    let (c, h, w) = ds
        .image_shape()
        .ok_or_else(|| ArlError::Contract("dataset has no images".into()))?;
    let mut ok = c == desc.in_channels && h == desc.side && w == desc.side;
    if desc.mode == Mode::Supervised && desc.absolute {
        ok &= desc.attr_dim == ds.attribute_dim() && desc.num_classes == ds.splits().train.len();
    }
    if ok {
        return Ok(());
    }
    Err(ArlError::DescriptorMismatch {
        checkpoint: desc.to_json(),
        dataset: serde_json::json!({
            "in_channels": c,
            "side": h,
            "attr_dim": ds.attribute_dim(),
            "num_classes": ds.splits().train.len(),
        })
        .to_string(),
    })
}

const ENCODE_CHUNK: usize = 64;

/// Φ of every instance of a split, computed once with frozen statistics.
fn encode_split<T: Real>(store: &ParameterStore<T>, ds: &Dataset, split: Split) -> Result<HashMap<usize, Vec<T>>> {
    let ids = ds.split_instances(split);
    let chunks: Vec<&[usize]> = ids.chunks(ENCODE_CHUNK).collect();
    let encoded: Vec<Vec<(usize, Vec<T>)>> = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<(usize, Vec<T>)>> {
            let mut tape = Tape::new();
            let net = store.bind_frozen(&mut tape);
            let x = tape.constant(dataset_images(ds, chunk)?);
            let phi = encode(&mut tape, &net, &mut store.eval_phase(), x)?;
            let data = tape.value(phi).data();
            let row = data.len() / chunk.len();
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| (i, data[k * row..(k + 1) * row].to_vec()))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(encoded.into_iter().flatten().collect())
}

/// Episodic evaluation: each query goes to the class with the highest ĉ*.
/// Episodes run in parallel; results come back in episode order.
pub fn evaluate<T: Real>(
    store: &ParameterStore<T>,
    ds: &Dataset,
    spec: &EvalSpec,
) -> Result<(EvalReport, Vec<EpisodeScores>)> {
    let desc = store.descriptor();
    check_compatible(desc, ds)?;
    let cache = encode_split(store, ds, spec.split)?;
    let k = desc.enc_channels;
    let s = desc.phi_side();

    let dump: Vec<EpisodeScores> = (0..spec.episodes)
        .into_par_iter()
        .map(|e| -> Result<EpisodeScores> {
            let ep = sample_episode(
                ds,
                spec.way,
                spec.shot,
                spec.queries,
                spec.split,
                derive_seed(spec.seed, e as u64),
            )?;
            let ids = ep.all_instances();
            let mut rows = Vec::with_capacity(ids.len() * k * s * s);
            for i in &ids {
                rows.extend_from_slice(&cache[i]);
            }
            let mut tape = Tape::new();
            let net = store.bind_frozen(&mut tape);
            let mut phase = store.eval_phase();
            let phi = tape.constant(Tensor::new(vec![ids.len(), k, s, s], rows)?);
            let ns = ep.support.len();
            let q_idx: Vec<usize> = (ns..ids.len()).collect();
            let protos = tape.group_mean(phi, &ep.support_groups())?;
            let queries = tape.gather(phi, &q_idx)?;
            let (pa, qa) = if desc.abs_feedback {
                (
                    Some(absolute_heads(&mut tape, &net, protos)?),
                    Some(absolute_heads(&mut tape, &net, queries)?),
                )
            } else {
                (None, None)
            };
            let pairs = crate::arlnet::episode_pairs(ep.way, ep.query.len());
            let pass = relation_pass(&mut tape, &net, &mut phase, protos, queries, pa, qa, &pairs)?;
            let flat = tape.value(pass.c_rel).to_f64_vec();
            Ok(EpisodeScores {
                episode: e,
                labels: ep.query_labels.clone(),
                scores: flat.chunks(ep.way).map(|c| c.to_vec()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let accs = dump.iter().map(|d| d.accuracy()).collect();
    Ok((EvalReport::from_accuracies(accs, spec.way, spec.shot), dump))
}

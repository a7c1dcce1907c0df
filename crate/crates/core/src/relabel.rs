//! Supervision signals in label space: binary and soft relation labels,
//! absolute targets, and their augmentation-key analogues.

use crate::data::{AttributeVector, AugmentationKey, Dataset, Episode};
use crate::error::{dim_err, ArlError, Result};

/// Per-pair relation supervision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelationTarget {
    pub i: usize,
    pub j: usize,
    pub c_hat: f64,
    pub a_hat: f64,
}

pub fn binary_label(c_i: usize, c_j: usize) -> u8 {
    (c_i == c_j) as u8
}

/// `exp(-sum_k |a_k - b_k|^p)`.
pub fn soft_label(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err(
            "soft_label",
            format!("attribute lengths {} and {} differ", a.len(), b.len()),
        ));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(ArlError::Contract(format!("soft_label needs p > 0, got {}", p)));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(p)).sum();
    Ok((-d).exp())
}

/// Relation targets for every (support class, query) pair of an episode,
/// query-major: pair `q * way + c`.
pub fn episode_relation_targets(ep: &Episode, ds: &Dataset, p: f64) -> Result<Vec<RelationTarget>> {
    let mut out = Vec::with_capacity(ep.query.len() * ep.way);
    for (q, &lq) in ep.query_labels.iter().enumerate() {
        let aq = ep.attribute(ds, lq);
        for c in 0..ep.way {
            out.push(RelationTarget {
                i: c,
                j: q,
                c_hat: binary_label(c, lq) as f64,
                a_hat: soft_label(ep.attribute(ds, c).as_slice(), aq.as_slice(), p)?,
            });
        }
    }
    Ok(out)
}

/// Per-instance targets for the absolute heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsoluteTargets {
    /// Position in the training vocabulary.
    pub classes: Vec<usize>,
    pub attributes: Vec<AttributeVector>,
}

/// Targets for `ep.all_instances()` (support first, then queries).
pub fn absolute_targets(ep: &Episode, ds: &Dataset) -> Result<AbsoluteTargets> {
    let mut classes = Vec::new();
    let mut attributes = Vec::new();
    for inst in ep.all_instances() {
        let class = ds.class_of(inst);
        let v = ds.train_vocab_index(class).ok_or_else(|| {
            ArlError::Contract(format!(
                "class {} (id {}) is outside the training vocabulary",
                class,
                ds.classes()[class].id
            ))
        })?;
        classes.push(v);
        attributes.push(ds.classes()[class].attribute.clone());
    }
    Ok(AbsoluteTargets { classes, attributes })
}

/// Self-supervised targets for a pair of augmented samples.
#[derive(Clone, Debug, PartialEq)]
pub struct UnsupTargets {
    pub relation: RelationTarget,
    pub key_i: Vec<f64>,
    pub key_j: Vec<f64>,
}

pub fn unsup_targets(key_i: &AugmentationKey, key_j: &AugmentationKey, p: f64) -> Result<UnsupTargets> {
    let (ki, kj) = (key_i.as_attribute(), key_j.as_attribute());
    Ok(UnsupTargets {
        relation: RelationTarget {
            i: key_i.source,
            j: key_j.source,
            c_hat: binary_label(key_i.source, key_j.source) as f64,
            a_hat: soft_label(&ki, &kj, p)?,
        },
        key_i: ki,
        key_j: kj,
    })
}

#[cfg(test)]
mod tests;

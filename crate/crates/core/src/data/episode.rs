use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttributeVector, Dataset, Split};
use crate::error::{ArlError, Result};

/// One L-way Z-shot task. Support is class-major (`way * shot`), queries come
/// in consecutive per-class blocks (`way * queries`). Labels are episode-local.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub split: Split,
    pub seed: u64,
    /// Dataset class index behind each local label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn attribute<'a>(&self, ds: &'a Dataset, local: usize) -> &'a AttributeVector {
        &ds.classes()[self.classes[local]].attribute
    }

    /// Support positions of each local class, for shot pooling.
    pub fn support_groups(&self) -> Vec<Vec<usize>> {
        (0..self.way)
            .map(|c| (c * self.shot..(c + 1) * self.shot).collect())
            .collect()
    }

    /// Support instances first, then queries.
    pub fn all_instances(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).copied().collect()
    }
}

pub fn sample_episode(
    ds: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    split: Split,
    seed: u64,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(ArlError::Contract(format!(
            "episode needs positive way/shot/queries (got {}/{}/{})",
            way, shot, queries
        )));
    }
    let pool = ds.splits().get(split);
    if pool.len() < way {
        return Err(ArlError::Capacity(format!(
            "{} split has {} classes, {}-way episode needs {}",
            split.name(),
            pool.len(),
            way,
            way
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = index::sample(&mut rng, pool.len(), way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    let mut picks = Vec::with_capacity(way);
    for &c in &classes {
        let n = ds.classes()[c].images.len();
        if n < shot + queries {
            return Err(ArlError::Capacity(format!(
                "class {} has {} instances, episode needs {} (shot {} + queries {})",
                ds.classes()[c].id,
                n,
                shot + queries,
                shot,
                queries
            )));
        }
        picks.push(index::sample(&mut rng, n, shot + queries).into_vec());
    }
    for (&c, pick) in classes.iter().zip(&picks) {
        support.extend(pick[..shot].iter().map(|&k| ds.instance_id(c, k)));
    }
    for (&c, pick) in classes.iter().zip(&picks) {
        query.extend(pick[shot..].iter().map(|&k| ds.instance_id(c, k)));
    }
    Ok(Episode {
        way,
        shot,
        queries,
        split,
        seed,
        classes,
        support_labels: (0..way).flat_map(|c| std::iter::repeat(c).take(shot)).collect(),
        query_labels: (0..way).flat_map(|c| std::iter::repeat(c).take(queries)).collect(),
        support,
        query,
    })
}

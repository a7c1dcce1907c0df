//! Losses, optimizer, the ArL objective, training loops, weight search and
//! episodic evaluation.

mod adam;
mod check;
mod config;
mod evaluate;
pub mod losses;
mod metrics;
mod search;
mod supervised;
mod unsupervised;

use crate::arlnet::{Descriptor, ParameterStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{r, Real};

pub use adam::{Adam, LrSchedule};
pub use check::{objective_gradcheck, ObjectiveProbe};
pub use config::{LossWeights, TrainConfig};
pub use evaluate::{check_compatible, evaluate, recount, EpisodeScores, EvalReport, EvalSpec};
pub use losses::{loss_abss, loss_absc, loss_key_bits, loss_relc, loss_rels, loss_urn, loss_urn_batch};
pub use metrics::{moving_average, EvalRecord, MetricRecord, MetricsSink};
pub use search::{sample_weights, search_weights, SearchBudget, SearchTrial};
pub use supervised::{supervised_objective, train_baseline, train_supervised};
pub use unsupervised::{train_unsupervised, unsup_objective};

/// Deterministic per-iteration (or per-episode) seed.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(k))
}

/// `L_relc + α L_rels + β L_absc + γ L_abss`; absent or zero-weighted terms
/// are left out of the graph.
pub fn combined_objective<T: Real>(
    tape: &mut Tape<T>,
    relc: Var,
    rels: Option<Var>,
    absc: Option<Var>,
    abss: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = relc;
    for (v, weight) in [(rels, w.alpha), (absc, w.beta), (abss, w.gamma)] {
        if let Some(v) = v {
            if weight != 0.0 {
                let s = tape.scale(v, r(weight));
                total = tape.add(total, s)?;
            }
        }
    }
    Ok(total)
}

/// Loss terms of one step, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub relc: Var,
    pub rels: Option<Var>,
    pub absc: Option<Var>,
    pub abss: Option<Var>,
    pub total: Var,
}

impl StepLosses {
    pub fn record<T: Real>(&self, tape: &Tape<T>, iter: usize, lr: f64) -> MetricRecord {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        MetricRecord {
            iter,
            l_relc: val(Some(self.relc)),
            l_rels: val(self.rels),
            l_absc: val(self.absc),
            l_abss: val(self.abss),
            total: val(Some(self.total)),
            lr,
        }
    }
}

/// Parameters, optimizer state and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub store: ParameterStore<T>,
    pub adam: Adam<T>,
    pub iteration: usize,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(descriptor: Descriptor, seed: u64) -> Result<Self> {
        let store = ParameterStore::new(descriptor, seed)?;
        let adam = Adam::new(store.tensors());
        Ok(TrainState {
            store,
            adam,
            iteration: 0,
        })
    }
}

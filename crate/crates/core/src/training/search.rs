use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{ArlError, Result};

use super::{evaluate, train_supervised, EvalSpec, LossWeights, MetricsSink, TrainConfig, TrainState};

/// Per-trial budget of the weight search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchBudget {
    pub trials: usize,
    pub iterations: usize,
    pub val_episodes: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            trials: 20,
            iterations: 500,
            val_episodes: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchTrial {
    pub weights: LossWeights,
    pub val_acc: f64,
}

fn log_uniform<R: Rng>(rng: &mut R) -> f64 {
    let (lo, hi) = (LossWeights::MIN.ln(), LossWeights::MAX.ln());
    rng.gen_range(lo..=hi).exp().clamp(LossWeights::MIN, LossWeights::MAX)
}

/// One log-uniform draw over `[0.001, 1]^3`.
pub fn sample_weights<R: Rng>(rng: &mut R) -> LossWeights {
    LossWeights {
        alpha: log_uniform(rng),
        beta: log_uniform(rng),
        gamma: log_uniform(rng),
    }
}

/// Random search over (α, β, γ) scored by validation accuracy. Every trial
/// sees the same validation episodes. Ties go to the earlier trial.
pub fn search_weights(
    cfg: &TrainConfig,
    ds: &Dataset,
    budget: &SearchBudget,
    seed: u64,
) -> Result<(LossWeights, Vec<SearchTrial>)> {
    if budget.trials == 0 {
        return Err(ArlError::Config("weight search needs at least one trial".into()));
    }
    let val_classes = ds.splits().val.len();
    if val_classes == 0 {
        return Err(ArlError::Capacity("validation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(budget.trials);
    for _ in 0..budget.trials {
        let weights = sample_weights(&mut rng);
        let run = TrainConfig {
            weights,
            iterations: budget.iterations,
            ..cfg.clone()
        };
        let state = TrainState::<f32>::fresh(run.descriptor(ds)?, run.seed)?;
        let state = train_supervised(&run, ds, state, &mut MetricsSink::memory(run.log_every))?;
        let spec = EvalSpec {
            split: Split::Val,
            way: cfg.way.min(val_classes),
            shot: cfg.shot,
            queries: cfg.queries,
            episodes: budget.val_episodes,
            seed: seed ^ 0x5eed_0f_7a11,
        };
        let (report, _) = evaluate(&state.store, ds, &spec)?;
        trials.push(SearchTrial {
            weights,
            val_acc: report.acc,
        });
    }
    let best = trials
        .iter()
        .fold(trials[0], |b, t| if t.val_acc > b.val_acc { *t } else { b });
    Ok((best.weights, trials))
}

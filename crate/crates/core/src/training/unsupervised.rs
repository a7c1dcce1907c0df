use crate::arlnet::{unsup_forward, Net, Phase};
use crate::autodiff::Tape;
use crate::data::{sample_unsup_batch, Dataset, Split, UnlabeledPool, UnsupBatch};
use crate::error::{ArlError, Result};
use crate::relabel::soft_label;
use crate::tensor::{r, Real};

use super::{
    combined_objective, derive_seed, loss_abss, loss_key_bits, loss_rels, loss_urn_batch, MetricsSink, StepLosses,
    TrainConfig, TrainState,
};

/// Contrastive objective on one batch. The class-relative slot holds L_urn;
/// key bits stand in for attributes (MSE) and for classes (per-bit BCE).
pub fn unsup_objective<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    batch: &UnsupBatch,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let fwd = unsup_forward(tape, net, phase, batch)?;
    let contrast: Vec<T> = fwd.contrast_targets().into_iter().map(r).collect();
    let relc = loss_urn_batch(tape, fwd.pass.c_rel, &contrast, fwd.n_pairs)?;
    let keys: Vec<Vec<f64>> = batch
        .pairs
        .iter()
        .flat_map(|p| p.x.keys.iter().chain(&p.y.keys))
        .map(|k| k.as_attribute())
        .collect();
    let rels = match fwd.pass.a_rel {
        Some(a) => {
            let mut a_hat = Vec::with_capacity(fwd.pairs.len());
            for &(i, j) in &fwd.pairs {
                a_hat.push(r(soft_label(&keys[i], &keys[j], cfg.p)?));
            }
            Some(loss_rels(tape, a, &a_hat)?)
        }
        None => None,
    };
    let (absc, abss) = match fwd.abs {
        Some(abs) => {
            let bits: Vec<T> = keys.iter().flatten().map(|&b| r(b)).collect();
            (
                Some(loss_key_bits(tape, abs.c, &bits)?),
                Some(loss_abss(tape, abs.a, &bits)?),
            )
        }
        None => (None, None),
    };
    let total = combined_objective(tape, relc, rels, absc, abss, &cfg.weights)?;
    Ok(StepLosses {
        relc,
        rels,
        absc,
        abss,
        total,
    })
}

/// Contrastive training on unlabeled training-split images.
pub fn train_unsupervised<T: Real>(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut state: TrainState<T>,
    sink: &mut MetricsSink,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    let pool = UnlabeledPool::from_split(ds, Split::Train);
    for it in state.iteration..cfg.iterations {
        let batch = sample_unsup_batch(&pool, cfg.pairs, cfg.m, derive_seed(cfg.seed, it as u64))?;
        let lr = cfg.lr.at(it);
        let mut tape = Tape::new();
        let net = state.store.bind(&mut tape);
        let losses = {
            let mut phase = state.store.train_phase();
            unsup_objective(&mut tape, &net, &mut phase, &batch, cfg)?
        };
        if !tape.value(losses.total).item().is_finite() {
            return Err(ArlError::NonFiniteLoss { iteration: it });
        }
        tape.backward(losses.total)?;
        let grads: Vec<Option<&[T]>> = net.vars().iter().map(|&v| tape.grad(v)).collect();
        state.adam.update(state.store.tensors_mut(), &grads, lr);
        state.iteration = it + 1;
        sink.push(losses.record(&tape, it + 1, lr))?;
    }
    sink.flush()?;
    Ok(state)
}

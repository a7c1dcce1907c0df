use crate::arlnet::{dataset_images, episode_forward, BaselineNet, Net, Phase};
use crate::autodiff::{Tape, Var};
use crate::data::{sample_episode, Dataset, Episode, Split};
use crate::error::{ArlError, Result};
use crate::relabel::{absolute_targets, episode_relation_targets};
use crate::tensor::{r, Real};

use super::{
    combined_objective, derive_seed, loss_abss, loss_absc, loss_relc, loss_rels, Adam, MetricRecord, MetricsSink,
    StepLosses, TrainConfig, TrainState,
};

/// Forward one episode and assemble every loss term.
pub fn supervised_objective<T: Real>(
    tape: &mut Tape<T>,
    net: &Net,
    phase: &mut Phase<'_, T>,
    ep: &Episode,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let fb = episode_forward(tape, net, phase, ep, ds)?;
    let targets = episode_relation_targets(ep, ds, cfg.p)?;
    let c_hat: Vec<T> = targets.iter().map(|t| r(t.c_hat)).collect();
    let relc = loss_relc(tape, fb.pass.c_rel, &c_hat)?;
    let rels = match fb.pass.a_rel {
        Some(a) => {
            let a_hat: Vec<T> = targets.iter().map(|t| r(t.a_hat)).collect();
            Some(loss_rels(tape, a, &a_hat)?)
        }
        None => None,
    };
    let (absc, abss) = match fb.abs {
        Some(abs) => {
            let t = absolute_targets(ep, ds)?;
            let attrs: Vec<T> = t.attributes.iter().flat_map(|a| a.0.iter().map(|&x| r(x))).collect();
            (
                Some(loss_absc(tape, abs.c, &t.classes)?),
                Some(loss_abss(tape, abs.a, &attrs)?),
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

fn guard<T: Real>(tape: &Tape<T>, total: Var, iteration: usize) -> Result<()> {
    if tape.value(total).item().is_finite() {
        Ok(())
    } else {
        Err(ArlError::NonFiniteLoss { iteration })
    }
}

fn train_episode(ds: &Dataset, cfg: &TrainConfig, it: usize) -> Result<Episode> {
    sample_episode(ds, cfg.way, cfg.shot, cfg.queries, Split::Train, derive_seed(cfg.seed, it as u64))
}

/// Episodic training with the combined objective, from `state.iteration` up to
/// `cfg.iterations`.
pub fn train_supervised<T: Real>(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut state: TrainState<T>,
    sink: &mut MetricsSink,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    for it in state.iteration..cfg.iterations {
        let ep = train_episode(ds, cfg, it)?;
        let lr = cfg.lr.at(it);
        let mut tape = Tape::new();
        let net = state.store.bind(&mut tape);
        let losses = {
            let mut phase = state.store.train_phase();
            supervised_objective(&mut tape, &net, &mut phase, &ep, ds, cfg)?
        };
        guard(&tape, losses.total, it)?;
        tape.backward(losses.total)?;
        let grads: Vec<Option<&[T]>> = net.vars().iter().map(|&v| tape.grad(v)).collect();
        state.adam.update(state.store.tensors_mut(), &grads, lr);
        state.iteration = it + 1;
        sink.push(losses.record(&tape, it + 1, lr))?;
    }
    sink.flush()?;
    Ok(state)
}

/// The plain relation-network trainer, built on [`BaselineNet`] alone.
/// Disabled loss terms are logged as zero.
pub fn train_baseline<T: Real>(cfg: &TrainConfig, ds: &Dataset, sink: &mut MetricsSink) -> Result<BaselineNet<T>> {
    cfg.validate()?;
    let (_, side, _) = ds
        .image_shape()
        .ok_or_else(|| ArlError::Contract("dataset has no images".into()))?;
    let mut net = BaselineNet::<T>::new(side, cfg.channels, cfg.hidden, cfg.seed)?;
    let mut adam = Adam::new(net.tensors());
    for it in 0..cfg.iterations {
        let ep = train_episode(ds, cfg, it)?;
        let lr = cfg.lr.at(it);
        let mut tape = Tape::new();
        let images = dataset_images(ds, &ep.all_instances())?;
        let (leaves, scores) = net.forward(&mut tape, images, &ep.support_groups(), ep.query.len(), true)?;
        let mut target = Vec::with_capacity(ep.query.len() * ep.way);
        for &lq in &ep.query_labels {
            for c in 0..ep.way {
                target.push(if c == lq { T::one() } else { T::zero() });
            }
        }
        let loss = loss_relc(&mut tape, scores, &target)?;
        guard(&tape, loss, it)?;
        tape.backward(loss)?;
        let grads: Vec<Option<&[T]>> = leaves.iter().map(|&v| tape.grad(v)).collect();
        adam.update(net.tensors_mut(), &grads, lr);
        let l = tape.value(loss).item().as_f64();
        sink.push(MetricRecord {
            iter: it + 1,
            l_relc: l,
            l_rels: 0.0,
            l_absc: 0.0,
            l_abss: 0.0,
            total: l,
            lr,
        })?;
    }
    sink.flush()?;
    Ok(net)
}

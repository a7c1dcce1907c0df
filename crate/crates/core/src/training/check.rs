//! Finite-difference check of the full supervised objective on a shrunken net.

use crate::arlnet::ParameterStore;
use crate::autodiff::gradcheck::{fd_step, rel_err, GradCheck};
use crate::autodiff::{OpKind, Tape};
use crate::data::{generate_synthetic, sample_episode, Dataset, Episode, Split};
use crate::error::Result;
use crate::tensor::Real;

use super::{supervised_objective, LossWeights, TrainConfig};

/// A tiny network, dataset and 2-way 1-shot episode for gradient probes.
pub struct ObjectiveProbe {
    pub ds: Dataset,
    pub cfg: TrainConfig,
    pub store: ParameterStore<f64>,
    pub episode: Episode,
}

impl ObjectiveProbe {
    /// 8-channel net with every ArL feature on.
    pub fn shrunken(seed: u64) -> Result<Self> {
        let cfg = TrainConfig {
            way: 2,
            shot: 1,
            queries: 1,
            channels: 8,
            hidden: 8,
            weights: LossWeights {
                alpha: 0.5,
                beta: 0.5,
                gamma: 0.5,
            },
            abs_feedback: true,
            rel_feedback: true,
            seed,
            ..TrainConfig::default()
        };
        Self::with_config(cfg)
    }

    pub fn with_config(cfg: TrainConfig) -> Result<Self> {
        let ds = generate_synthetic(cfg.seed, 10, 10, 28)?;
        let store = ParameterStore::new(cfg.descriptor(&ds)?, cfg.seed)?;
        let episode = sample_episode(&ds, cfg.way, cfg.shot, cfg.queries, Split::Train, cfg.seed)?;
        Ok(ObjectiveProbe {
            ds,
            cfg,
            store,
            episode,
        })
    }

    /// Objective value in f64 at the given parameters (training-mode batch norm).
    pub fn loss(&self, store: &ParameterStore<f64>) -> Result<f64> {
        let mut store = store.clone();
        let mut tape = Tape::new();
        let net = store.bind(&mut tape);
        let mut phase = store.train_phase();
        let l = supervised_objective(&mut tape, &net, &mut phase, &self.episode, &self.ds, &self.cfg)?;
        Ok(tape.value(l.total).item())
    }

    /// Tape gradients in precision `T`, one vector per parameter tensor.
    pub fn analytic<T: Real>(&self, fault: Option<OpKind>) -> Result<Vec<Vec<f64>>> {
        let mut store = self.store.cast::<T>();
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let net = store.bind(&mut tape);
        let mut phase = store.train_phase();
        let l = supervised_objective(&mut tape, &net, &mut phase, &self.episode, &self.ds, &self.cfg)?;
        tape.backward(l.total)?;
        Ok(net
            .vars()
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| match tape.grad(v) {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; t.len()],
            })
            .collect())
    }

    /// Central difference for one element, evaluated in f64.
    pub fn numeric(&self, tensor: usize, elem: usize) -> Result<f64> {
        let mut work = self.store.clone();
        let x = work.tensors()[tensor].data()[elem];
        let h = fd_step(x);
        work.tensors_mut()[tensor].data_mut()[elem] = x + h;
        let lp = self.loss(&work)?;
        work.tensors_mut()[tensor].data_mut()[elem] = x - h;
        let lm = self.loss(&work)?;
        Ok((lp - lm) / ((x + h) - (x - h)))
    }
}

/// Every parameter of the shrunken net against central differences. The
/// numeric side is always f64; `T` sets the precision of the tape gradients.
pub fn objective_gradcheck<T: Real>(seed: u64, fault: Option<OpKind>) -> Result<GradCheck> {
    let probe = ObjectiveProbe::shrunken(seed)?;
    let analytic = probe.analytic::<T>(fault)?;
    let mut out = GradCheck {
        name: "objective".into(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, g) in analytic.iter().enumerate() {
        for (k, &a) in g.iter().enumerate() {
            let err = rel_err(a, probe.numeric(ti, k)?);
            out.checked += 1;
            if !(err <= out.max_rel_err) {
                out.max_rel_err = err;
                out.worst = Some((ti, k));
            }
        }
    }
    Ok(out)
}

//! Plain relation network (encoder, 4-block trunk, two-FC head), written
//! without any of the ArL machinery so the two graphs can be compared value
//! for value.

use crate::autodiff::{BnMode, RunningStats, Tape, Var};
use crate::error::{ArlError, Result};
use crate::tensor::{r, Real, Tensor};

use super::{init_tensor, Init, ParameterStore, BN_EPS, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineNet<T> {
    pub side: usize,
    pub channels: usize,
    pub hidden: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
}

fn conv_names(prefix: &str, cin: usize, cout: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}.conv.w"), vec![cout, cin, 3, 3], Init::FanIn(cin * 9)),
        (format!("{prefix}.conv.b"), vec![cout], Init::Zeros),
        (format!("{prefix}.bn.gamma"), vec![cout], Init::Ones),
        (format!("{prefix}.bn.beta"), vec![cout], Init::Zeros),
    ]
}

impl<T: Real> BaselineNet<T> {
    pub fn new(side: usize, channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        if side >> 4 == 0 {
            return Err(ArlError::Contract(format!("side {} too small for 4 pooling stages", side)));
        }
        let k = channels;
        let mut spec = Vec::new();
        for b in 0..4 {
            spec.extend(conv_names(&format!("enc.{b}"), if b == 0 { 3 } else { k }, k));
        }
        for b in 0..4 {
            spec.extend(conv_names(&format!("trunk.{b}"), if b == 0 { 2 * k } else { k }, k));
        }
        let mut s = side >> 4;
        for _ in 0..4 {
            if s > 1 {
                s /= 2;
            }
        }
        let flat = k * s * s;
        spec.push(("rc.fc1.w".into(), vec![hidden, flat], Init::FanIn(flat)));
        spec.push(("rc.fc1.b".into(), vec![hidden], Init::Zeros));
        spec.push(("rc.fc2.w".into(), vec![1, hidden], Init::FanIn(hidden)));
        spec.push(("rc.fc2.b".into(), vec![1], Init::Zeros));
        Ok(BaselineNet {
            side,
            channels,
            hidden,
            tensors: spec.iter().map(|(n, s, i)| init_tensor(seed, n, s, *i)).collect(),
            names: spec.into_iter().map(|(n, _, _)| n).collect(),
            stats: (0..8).map(|_| RunningStats::standard(k)).collect(),
        })
    }

    /// Copy encoder, trunk and r_c parameters (and their running stats) by name.
    pub fn load_from(&mut self, store: &ParameterStore<T>) -> Result<()> {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            let src = store
                .get(name)
                .ok_or_else(|| ArlError::Contract(format!("store lacks `{}`", name)))?;
            if src.shape() != t.shape() {
                return Err(ArlError::Contract(format!(
                    "`{}` has shape {:?} in the store, {:?} here",
                    name,
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        let bn_names = (0..4).map(|b| format!("enc.{b}.bn")).chain((0..4).map(|b| format!("trunk.{b}.bn")));
        for (name, st) in bn_names.zip(&mut self.stats) {
            let i = store
                .bn_names()
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ArlError::Contract(format!("store lacks stats `{}`", name)))?;
            *st = store.stats()[i].clone();
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    /// Relation scores for every (class, query) pair, query-major, as `[P]`.
    /// Returns the parameter leaves alongside.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        images: Tensor<T>,
        support_groups: &[Vec<usize>],
        n_query: usize,
        train: bool,
    ) -> Result<(Vec<Var>, Var)> {
        let w: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let x = tape.constant(images);
        let ns: usize = support_groups.iter().map(|g| g.len()).sum();
        let mut bn_slot = 0;
        let mut block = |tape: &mut Tape<T>, stats: &mut [RunningStats<T>], x: Var, pool: bool| -> Result<Var> {
            let base = bn_slot * 4;
            let y = tape.conv2d(x, w[base], w[base + 1], 1, 1)?;
            let mode = if train {
                BnMode::Train {
                    stats: &mut stats[bn_slot],
                    momentum: r(BN_MOMENTUM),
                }
            } else {
                BnMode::Eval { stats: &stats[bn_slot] }
            };
            let y = tape.batchnorm2d(y, w[base + 2], w[base + 3], mode, r(BN_EPS))?;
            let y = tape.relu(y);
            bn_slot += 1;
            if pool {
                tape.maxpool2x2(y)
            } else {
                Ok(y)
            }
        };

        let mut phi = x;
        for _ in 0..4 {
            phi = block(tape, &mut self.stats, phi, true)?;
        }
        let protos = tape.group_mean(phi, support_groups)?;
        let q: Vec<usize> = (ns..ns + n_query).collect();
        let queries = tape.gather(phi, &q)?;

        let way = support_groups.len();
        let (mut ci, mut qi) = (Vec::new(), Vec::new());
        for qq in 0..n_query {
            for c in 0..way {
                ci.push(c);
                qi.push(qq);
            }
        }
        let a = tape.gather(protos, &ci)?;
        let b = tape.gather(queries, &qi)?;
        let mut h = tape.concat(&[a, b], 1)?;
        let mut s = self.side >> 4;
        for _ in 0..4 {
            let pool = s > 1;
            if pool {
                s /= 2;
            }
            h = block(tape, &mut self.stats, h, pool)?;
        }
        let h = tape.flatten(h)?;
        let n = w.len();
        let h = tape.fully_connected(h, w[n - 4], w[n - 3])?;
        let h = tape.relu(h);
        let h = tape.fully_connected(h, w[n - 2], w[n - 1])?;
        let h = tape.sigmoid(h);
        let p = tape.shape(h)[0];
        let out = tape.reshape(h, &[p])?;
        Ok((w, out))
    }
}

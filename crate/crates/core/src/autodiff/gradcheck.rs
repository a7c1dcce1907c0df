//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{r, Real, Tensor};

use super::tape::{BnMode, OpKind, RunningStats, Tape, Var};

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Default tolerance on the relative error for a precision.
pub fn tolerance<T: Real>() -> f64 {
    if T::BYTES == 4 {
        1e-3
    } else {
        1e-6
    }
}

/// Step `cbrt(eps) * max(1, |x|)`.
pub fn fd_step<T: Real>(x: T) -> T {
    T::epsilon().cbrt() * x.abs().max(T::one())
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare the tape gradient of `f` against central differences, element by
/// element, over every input tensor.
pub fn check_fn<T, F>(name: &str, inputs: &[Tensor<T>], f: F, fault: Option<OpKind>) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect();

    let mut work = inputs.to_vec();
    let mut out = GradCheck {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let x = t.data()[k];
            let h = fd_step(x);
            let (xp, xm) = (x + h, x - h);
            work[ti].data_mut()[k] = xp;
            let lp = eval(&work)?;
            work[ti].data_mut()[k] = xm;
            let lm = eval(&work)?;
            work[ti].data_mut()[k] = x;
            let numeric = (lp - lm) / (xp - xm).as_f64();
            let err = rel_err(analytic[ti][k].as_f64(), numeric);
            out.checked += 1;
            if !(err <= out.max_rel_err) {
                out.max_rel_err = err;
                out.worst = Some((ti, k));
            }
        }
    }
    Ok(out)
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            r(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Distinct values on a 0.1 grid in shuffled order, so max ties are never crossed.
fn distinct<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 0.1 * i as f64).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_f64(shape, &vals).expect("shape")
}

/// `sum(out * w)` with a fixed random `w`, turning any output into a scalar.
fn project<T: Real>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = uniform::<T>(&mut rng, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// One finite-difference check per registered op, in `OpKind::ALL` order.
pub fn op_suite<T: Real>(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    OpKind::ALL
        .iter()
        .map(|&kind| check_op::<T>(kind, seed, fault))
        .collect()
}

pub fn check_op<T: Real>(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(kind as u64));
    let name = kind.name();
    let s = seed;
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let a = uniform::<T>(&mut rng, &[3, 4], -1.0, 1.0);
            let b = uniform::<T>(&mut rng, &[3, 4], -1.0, 1.0);
            check_fn(
                name,
                &[a, b],
                |t, v| {
                    let y = match kind {
                        OpKind::Add => t.add(v[0], v[1])?,
                        OpKind::Sub => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, s)
                },
                fault,
            )
        }
        OpKind::Scale => {
            let a = uniform::<T>(&mut rng, &[3, 4], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.scale(v[0], r(0.7));
                project(t, y, s)
            }, fault)
        }
        OpKind::Sum | OpKind::Mean => {
            let a = uniform::<T>(&mut rng, &[3, 4], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = if kind == OpKind::Sum { t.sum(v[0]) } else { t.mean(v[0]) };
                project(t, y, s)
            }, fault)
        }
        OpKind::Square => {
            let a = uniform::<T>(&mut rng, &[3, 4], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.square(v[0]);
                project(t, y, s)
            }, fault)
        }
        OpKind::FullyConnected => {
            let x = uniform::<T>(&mut rng, &[3, 5], -1.0, 1.0);
            let w = uniform::<T>(&mut rng, &[4, 5], -1.0, 1.0);
            let b = uniform::<T>(&mut rng, &[4], -1.0, 1.0);
            check_fn(name, &[x, w, b], |t, v| {
                let y = t.fully_connected(v[0], v[1], v[2])?;
                project(t, y, s)
            }, fault)
        }
        OpKind::Conv2d => {
            let x = uniform::<T>(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
            let w = uniform::<T>(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
            let b = uniform::<T>(&mut rng, &[4], -1.0, 1.0);
            check_fn(name, &[x, w, b], |t, v| {
                let y1 = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let y2 = t.conv2d(v[0], v[1], v[2], 2, 0)?;
                let l1 = project(t, y1, s)?;
                let l2 = project(t, y2, s + 1)?;
                t.add(l1, l2)
            }, fault)
        }
        OpKind::BatchNorm2d => {
            let x = uniform::<T>(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            let g = uniform::<T>(&mut rng, &[2], 0.5, 1.5);
            let b = uniform::<T>(&mut rng, &[2], -0.5, 0.5);
            let frozen = RunningStats {
                mean: vec![r(0.1), r(-0.2)],
                var: vec![r(0.8), r(1.3)],
                initialized: true,
            };
            check_fn(name, &[x, g, b], |t, v| {
                let mut stats = RunningStats::standard(2);
                let y1 = t.batchnorm2d(
                    v[0],
                    v[1],
                    v[2],
                    BnMode::Train {
                        stats: &mut stats,
                        momentum: r(0.1),
                    },
                    r(1e-5),
                )?;
                let y2 = t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { stats: &frozen }, r(1e-5))?;
                let l1 = project(t, y1, s)?;
                let l2 = project(t, y2, s + 1)?;
                t.add(l1, l2)
            }, fault)
        }
        OpKind::Relu => {
            let a = off_zero::<T>(&mut rng, &[3, 4]);
            check_fn(name, &[a], |t, v| {
                let y = t.relu(v[0]);
                project(t, y, s)
            }, fault)
        }
        OpKind::Sigmoid => {
            let a = uniform::<T>(&mut rng, &[3, 4], -3.0, 3.0);
            check_fn(name, &[a], |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, s)
            }, fault)
        }
        OpKind::MaxPool2x2 => {
            let a = distinct::<T>(&mut rng, &[2, 2, 4, 5]);
            check_fn(name, &[a], |t, v| {
                let y = t.maxpool2x2(v[0])?;
                project(t, y, s)
            }, fault)
        }
        OpKind::GlobalAvgPool => {
            let a = uniform::<T>(&mut rng, &[2, 3, 2, 3], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, s)
            }, fault)
        }
        OpKind::Softmax => {
            let a = uniform::<T>(&mut rng, &[3, 4, 2], -2.0, 2.0);
            check_fn(name, &[a], |t, v| {
                let y = t.softmax(v[0], 1)?;
                project(t, y, s)
            }, fault)
        }
        OpKind::LogSoftmax => {
            let a = uniform::<T>(&mut rng, &[3, 5], -2.0, 2.0);
            check_fn(name, &[a], |t, v| {
                let y = t.log_softmax(v[0], 1)?;
                project(t, y, s)
            }, fault)
        }
        OpKind::Concat => {
            let a = uniform::<T>(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
            let b = uniform::<T>(&mut rng, &[2, 1, 2, 2], -1.0, 1.0);
            check_fn(name, &[a, b], |t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                project(t, y, s)
            }, fault)
        }
        OpKind::Reshape => {
            let a = uniform::<T>(&mut rng, &[2, 6], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                project(t, y, s)
            }, fault)
        }
        OpKind::Gather => {
            let a = uniform::<T>(&mut rng, &[4, 3], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.gather(v[0], &[2, 0, 2, 3])?;
                project(t, y, s)
            }, fault)
        }
        OpKind::GroupMean => {
            let a = distinct::<T>(&mut rng, &[5, 3]);
            check_fn(name, &[a], |t, v| {
                let y = t.group_mean(v[0], &[vec![0, 2], vec![1, 3, 4]])?;
                project(t, y, s)
            }, fault)
        }
        OpKind::TileSpatial => {
            let a = uniform::<T>(&mut rng, &[2, 3], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.tile_spatial(v[0], 2, 3)?;
                project(t, y, s)
            }, fault)
        }
        OpKind::BceWithLogits => {
            let a = uniform::<T>(&mut rng, &[3, 4], -3.0, 3.0);
            let target: Vec<T> = (0..12).map(|_| r(rng.gen_range(0.0..1.0))).collect();
            check_fn(name, &[a], |t, v| {
                let y = t.bce_with_logits(v[0], &target)?;
                project(t, y, s)
            }, fault)
        }
        OpKind::Pick => {
            let a = uniform::<T>(&mut rng, &[3, 5], -1.0, 1.0);
            check_fn(name, &[a], |t, v| {
                let y = t.pick(v[0], &[1, 4, 0])?;
                project(t, y, s)
            }, fault)
        }
    }
}

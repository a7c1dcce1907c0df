use crate::tensor::{r, Real, Tensor};

/// Step-decay schedule: `base * 0.5^floor(t / halve_every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        self.base * 0.5f64.powi((iteration / self.halve_every.max(1)) as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-3,
            halve_every: 5000,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&[T]>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match the parameters");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (r::<T>(self.beta1), r::<T>(self.beta2));
        let c1 = r::<T>(1.0 - self.beta1.powi(t));
        let c2 = r::<T>(1.0 - self.beta2.powi(t));
        let (lr, eps) = (r::<T>(lr), r::<T>(self.eps));
        let one = T::one();
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads.get(k).copied().flatten();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

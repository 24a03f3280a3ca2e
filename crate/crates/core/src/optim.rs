use crate::nn::{ParamGrads, ParamStore};
use crate::real::Real;

/// Adam with bias correction. Moment buffers are indexed like the store;
/// frozen tensors are never touched.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: store.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads` (already averaged over the batch).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(Some(g)) = grads.get(i) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for k in 0..p.data.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Base rate for the first half of the epochs, a tenth of it afterwards.
pub fn step_schedule(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epoch < epochs.div_ceil(2) {
        base
    } else {
        base / 10.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", 1, 2, vec![1.0, -1.0]);
        store.insert("frozen", 1, 1, vec![3.0]);
        store.set_trainable(|n| n == "frozen", false);
        let mut adam = Adam::new(&store);
        let grads = vec![Some(vec![0.5, -2.0]), Some(vec![1.0])];
        adam.step(&mut store, &grads, 0.1);
        let w = &store.get("w").unwrap().data;
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get("frozen").unwrap().data, vec![3.0]);
    }

    #[test]
    fn schedule_halves() {
        assert_eq!(step_schedule(5e-4, 0, 200), 5e-4);
        assert_eq!(step_schedule(5e-4, 99, 200), 5e-4);
        assert!((step_schedule(5e-4, 100, 200) - 5e-5).abs() < 1e-18);
    }
}

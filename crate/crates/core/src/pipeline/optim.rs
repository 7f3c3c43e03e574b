//! Optimisers over the trainable parameters of a [`ParamStore`].

use crate::params::ParamStore;

pub trait Optimizer {
    /// Updates every trainable parameter from its accumulated gradient.
    fn step(&mut self, store: &mut ParamStore);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        for p in store.iter_mut().filter(|p| p.trainable) {
            let lr = self.learning_rate;
            for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        }
    }
}

/// Bias-corrected first and second moment estimates per parameter entry.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, -2.0]));
        s.get_mut(id).grad = Tensor::vector(vec![0.5, -0.5]);
        s.add_fixed("mask", Tensor::vector(vec![3.0]));
        s
    }

    #[test]
    fn sgd_step() {
        let mut s = store();
        Sgd { learning_rate: 0.1 }.step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.95, -1.95]);
        assert_eq!(s.iter().nth(1).unwrap().value.data(), &[3.0]);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut s = store();
        Adam::new(0.01).step(&mut s);
        let w = s.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut s = store();
        let before: Vec<_> = s.iter().map(|p| p.value.clone()).collect();
        Adam::new(0.0).step(&mut s);
        Sgd { learning_rate: 0.0 }.step(&mut s);
        let after: Vec<_> = s.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }
}

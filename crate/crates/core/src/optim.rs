use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Array2<F>>,
    second: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Array2::zeros(store.get(id).dim()))
                .collect::<Vec<_>>()
        };
        Adam {
            cfg,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// First and second moment estimates, one per parameter tensor.
    pub fn moments(&self) -> (&[Array2<F>], &[Array2<F>]) {
        (&self.first, &self.second)
    }

    /// Restores a saved optimizer state.
    pub fn from_state(cfg: AdamConfig, step: u64, first: Vec<Array2<F>>, second: Vec<Array2<F>>) -> Self {
        assert_eq!(first.len(), second.len(), "moment lists differ in length");
        Adam {
            cfg,
            step,
            first,
            second,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Array2<F>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let b1 = F::of(self.cfg.beta1);
        let b2 = F::of(self.cfg.beta2);
        let one = F::one();
        let bc1 = one - F::of(self.cfg.beta1.powi(self.step as i32));
        let bc2 = one - F::of(self.cfg.beta2.powi(self.step as i32));
        let lr = F::of(self.cfg.learning_rate);
        let eps = F::of(self.cfg.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (one - b1) * g);
            v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (one - b2) * g * g);
            let param = store.get_mut(id);
            ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

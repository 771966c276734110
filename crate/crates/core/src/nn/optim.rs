use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{cast, Grads, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum with coupled L2 weight decay.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; `first`/`second` align with the parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub first: Vec<ArrayD<T>>,
    pub second: Vec<ArrayD<T>>,
    pub steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>) -> Self {
        let zeros = || store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    /// Applies one update; frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.steps += 1;
        let lr_t: T = cast(lr);
        for i in 0..store.values.len() {
            if !store.trainable[i] {
                continue;
            }
            let g = &grads.values[i];
            match self.kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    let (m, wd): (T, T) = (cast(momentum), cast(weight_decay));
                    Zip::from(&mut store.values[i])
                        .and(&mut self.first[i])
                        .and(g)
                        .for_each(|p, v, &g| {
                            *v = m * *v + g + wd * *p;
                            *p -= lr_t * *v;
                        });
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1: T = cast(1.0 - beta1.powi(t));
                    let c2: T = cast(1.0 - beta2.powi(t));
                    let (b1, b2, e): (T, T, T) = (cast(beta1), cast(beta2), cast(eps));
                    Zip::from(&mut store.values[i])
                        .and(&mut self.first[i])
                        .and(&mut self.second[i])
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = b1 * *m + (T::one() - b1) * g;
                            *v = b2 * *v + (T::one() - b2) * g * g;
                            *p -= lr_t * (*m / c1) / ((*v / c2).sqrt() + e);
                        });
                }
            }
        }
    }
}

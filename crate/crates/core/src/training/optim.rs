use serde::{Deserialize, Serialize};

use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order update rule with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer<P> {
    kind: OptimizerKind,
    moments: Option<(P, P)>,
    t: i32,
}

impl<P: ParamVector> Optimizer<P> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            moments: None,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut P, grad: &P, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.axpy(-lr, grad),
            OptimizerKind::Adam => {
                self.t += 1;
                let (m, v) = self.moments.get_or_insert_with(|| (grad.zeroed(), grad.zeroed()));
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                let g = grad.tensors();
                let (m, v) = (m.tensors_mut(), v.tensors_mut());
                for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((p, &g), m), v) in it {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

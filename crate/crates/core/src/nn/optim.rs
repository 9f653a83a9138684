use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Float, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum 0.9.
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
}

impl Optimizer {
    pub const MOMENTUM: f64 = 0.9;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update to every parameter from its accumulated gradient.
    pub fn step<'a, F: Float>(&mut self, params: impl IntoIterator<Item = &'a mut Param<F>>) {
        self.step += 1;
        let lr = F::lit(self.lr);
        let wd = F::lit(self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                let mu = F::lit(Self::MOMENTUM);
                for p in params {
                    let buf = p.moment1.get_or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    Zip::from(&mut p.value).and(buf).and(&p.grad).for_each(|w, v, &g| {
                        let g = g + wd * *w;
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    });
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (F::lit(Self::BETA1), F::lit(Self::BETA2));
                let c1 = F::lit(1.0 - Self::BETA1.powi(self.step as i32));
                let c2 = F::lit(1.0 - Self::BETA2.powi(self.step as i32));
                let eps = F::lit(Self::EPS);
                for p in params {
                    let m = p.moment1.get_or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    let v = p.moment2.get_or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    Zip::from(&mut p.value).and(m).and(v).and(&p.grad).for_each(|w, m, v, &g| {
                        let g = g + wd * *w;
                        *m = b1 * *m + (F::one() - b1) * g;
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

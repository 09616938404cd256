//! First-order optimizers over flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn sgd_momentum() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }

    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd => true,
            Optimizer::SgdMomentum { momentum } => (0.0..1.0).contains(&momentum),
            Optimizer::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bad optimizer settings {self:?}"
            )))
        }
    }
}

/// Optimizer state for one parameter block.
#[derive(Debug, Clone)]
pub struct BlockState {
    kind: Optimizer,
    weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl BlockState {
    pub fn new(kind: Optimizer, weight_decay: f64, len: usize) -> Self {
        let (first, second) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::SgdMomentum { .. } => (vec![0.0; len], Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; len], vec![0.0; len]),
        };
        Self {
            kind,
            weight_decay,
            first,
            second,
            steps: 0,
        }
    }

    /// Applies one update in place. Weight decay is added to the gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.steps += 1;
        let wd = self.weight_decay;
        match self.kind {
            Optimizer::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    let g = g + wd * *p;
                    *p -= lr * g;
                }
            }
            Optimizer::SgdMomentum { momentum } => {
                for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.first.iter_mut()) {
                    let g = g + wd * *p;
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = g + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut s = BlockState::new(Optimizer::Sgd, 0.0, 2);
        let mut p = [1.0, -1.0];
        s.step(&mut p, &[0.5, -0.5], 0.1);
        assert_eq!(p, [0.95, -0.95]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = BlockState::new(Optimizer::sgd_momentum(), 0.0, 1);
        let mut p = [0.0];
        s.step(&mut p, &[1.0], 1.0);
        s.step(&mut p, &[1.0], 1.0);
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = BlockState::new(Optimizer::adam(), 0.0, 2);
        let mut p = [0.0, 0.0];
        s.step(&mut p, &[1e-3, -40.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        for kind in [Optimizer::Sgd, Optimizer::sgd_momentum(), Optimizer::adam()] {
            let mut s = BlockState::new(kind, 0.0, 3);
            let mut p = [0.3, -0.7, 1.1];
            s.step(&mut p, &[0.1, 0.2, -0.3], 0.0);
            assert_eq!(p, [0.3, -0.7, 1.1]);
        }
    }
}

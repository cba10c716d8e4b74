// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

pub const DEFAULT_POLY_POWER: f64 = 0.9;

/// `base_lr · (1 − step/total_steps)^power`.
pub fn poly_lr(base_lr: f64, step: usize, total_steps: usize, power: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!(
            "poly_lr step {step} exceeds total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// SGD with momentum or Adam; per-parameter state lives here.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect();
        Optimizer {
            kind,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
        }
    }

    pub fn for_params(kind: OptimizerKind, params: &[&Tensor2]) -> Self {
        let shapes: Vec<(usize, usize)> = params.iter().map(|t| t.shape()).collect();
        Self::new(kind, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Tensor2>, grads: &[Tensor2], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                left: (params.len(), 0),
                right: (grads.len(), self.first.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = self.momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((pv, &gv), mv), vv) in it {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.1, 0, 10, 0.9).unwrap(), 0.1);
        assert_eq!(poly_lr(0.1, 10, 10, 0.9).unwrap(), 0.0);
        let half = poly_lr(1.0, 50, 100, 0.9).unwrap();
        assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 0.5359).abs() < 1e-4);
        assert!(poly_lr(0.1, 11, 10, 0.9).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut p = Tensor2::row_vector(&[1.0, -2.0]);
            let mut opt = Optimizer::for_params(kind, &[&p]);
            opt.step(vec![&mut p], &[Tensor2::zeros(1, 2)], 0.1).unwrap();
            assert_eq!(p.data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = Tensor2::scalar(3.0);
        let mut opt = Optimizer::for_params(OptimizerKind::SgdMomentum, &[&p]);
        opt.momentum = 0.0;
        opt.step(vec![&mut p], &[Tensor2::scalar(1.0)], 0.1).unwrap();
        assert!((p.item() - 2.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor2::scalar(0.0);
        let mut opt = Optimizer::for_params(OptimizerKind::SgdMomentum, &[&p]);
        opt.step(vec![&mut p], &[Tensor2::scalar(1.0)], 1.0).unwrap();
        opt.step(vec![&mut p], &[Tensor2::scalar(1.0)], 1.0).unwrap();
        assert!((p.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-3, 0.7, -250.0] {
            let mut p = Tensor2::scalar(1.0);
            let mut opt = Optimizer::for_params(OptimizerKind::Adam, &[&p]);
            opt.step(vec![&mut p], &[Tensor2::scalar(g)], 0.01).unwrap();
            let moved = 1.0 - p.item();
            assert!((moved.abs() - 0.01).abs() < 1e-6, "g={g} moved={moved}");
            assert_eq!(moved.signum(), f64::signum(g));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor2::zeros(2, 2);
        let mut opt = Optimizer::for_params(OptimizerKind::Adam, &[&p]);
        assert!(opt.step(vec![&mut p], &[Tensor2::zeros(1, 2)], 0.1).is_err());
    }
}

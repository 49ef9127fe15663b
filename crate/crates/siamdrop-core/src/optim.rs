//! SGD with classical momentum and L2 weight decay.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::tape::Grads;

/// Velocity update v = momentum*v + (g + weight_decay*p), then p -= lr*v.
/// One velocity buffer per parameter tensor, allocated lazily so parameters
/// untouched by a step stay untouched.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocities: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(n_params: usize, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocities: vec![Vec::new(); n_params],
        }
    }

    /// `params[i]` must be the tensor registered under parameter id `i`.
    /// Empty gradient slots (parameters off the loss path) are skipped.
    pub fn step(&mut self, params: &mut [&mut Vec<f32>], grads: &Grads) -> Result<(), OptimError> {
        if params.len() != self.velocities.len() || grads.len() != self.velocities.len() {
            return Err(OptimError::ParamCountMismatch {
                params: params.len(),
                grads: grads.len(),
                velocities: self.velocities.len(),
            });
        }
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i);
            if g.is_empty() {
                continue;
            }
            if g.len() != p.len() {
                return Err(OptimError::ShapeMismatch {
                    id: i,
                    param: p.len(),
                    grad: g.len(),
                });
            }
            let v = &mut self.velocities[i];
            if v.is_empty() {
                v.resize(p.len(), 0.0);
            }
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OptimError {
    ParamCountMismatch {
        params: usize,
        grads: usize,
        velocities: usize,
    },
    ShapeMismatch {
        id: usize,
        param: usize,
        grad: usize,
    },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::ParamCountMismatch {
                params,
                grads,
                velocities,
            } => write!(
                f,
                "parameter count mismatch: {params} params, {grads} grads, {velocities} velocity slots"
            ),
            OptimError::ShapeMismatch { id, param, grad } => {
                write!(f, "param {id}: tensor length {param} vs gradient length {grad}")
            }
        }
    }
}

impl core::error::Error for OptimError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::GradTape;
    use crate::tensor::FeatureMap;

    // Grads has no public constructor; record a 1x1 conv whose weight grad
    // equals the input value, so a chosen gradient can be injected through
    // the weight slot (param id 0).
    fn unit_grads(weight_grad: f32) -> Grads {
        let mut tape = GradTape::new(1);
        let layer = crate::conv::ConvLayer::new(1, 1, 1, 1, 1).unwrap();
        let x = tape.input(vec![
            FeatureMap::from_vec(1, 1, 1, vec![weight_grad]).unwrap(),
        ]);
        let y = tape.conv(&layer, Some(0), None, x).unwrap();
        tape.sum_all(y).unwrap();
        tape.backward().unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![1.25f32];
        let mut sgd = Sgd::new(1, 0.0, 0.9, 0.0);
        sgd.step(&mut [&mut p], &unit_grads(3.0)).unwrap();
        assert_eq!(p, vec![1.25]);
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = vec![1.0f32];
        let mut sgd = Sgd::new(1, 1.0, 0.0, 0.0);
        sgd.step(&mut [&mut p], &unit_grads(3.0)).unwrap();
        assert_eq!(p, vec![-2.0]);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        // Constant gradient 1 per step: v1 = 1, v2 = 0.9*1 + 1 = 1.9
        let lr = 0.1f32;
        let mut p = vec![0.0f32];
        let mut sgd = Sgd::new(1, lr, 0.9, 0.0);
        for _ in 0..2 {
            sgd.step(&mut [&mut p], &unit_grads(1.0)).unwrap();
        }
        let want = -(lr * 1.0 + lr * 1.9);
        assert!((p[0] - want).abs() < 1e-6, "{} vs {want}", p[0]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = vec![10.0f32];
        let mut sgd = Sgd::new(1, 0.1, 0.0, 0.5);
        sgd.step(&mut [&mut p], &unit_grads(1.0)).unwrap();
        // v = 1.0 + 0.5*10 = 6.0; p = 10 - 0.1*6
        assert!((p[0] - 9.4).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut p = vec![0.0f32, 0.0];
        let mut sgd = Sgd::new(1, 0.1, 0.0, 0.0);
        assert!(matches!(
            sgd.step(&mut [&mut p], &unit_grads(1.0)),
            Err(OptimError::ShapeMismatch { .. })
        ));
    }
}

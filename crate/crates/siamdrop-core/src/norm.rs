//! Per-channel batch normalisation with separate train (batch statistics,
//! running-average update) and eval (frozen statistics) paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{FeatureMap, TensorError};

/// Batch statistics saved by the training forward pass; the backward pass
/// needs exactly these.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub invstd: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Added to the variance before the square root.
    pub eps: f32,
    /// Fraction of the batch statistic blended into the running statistic.
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Defaults plus `eps = 0`, so eval mode is an exact f32 identity. Used
    /// by the identity response encoder, which must not perturb scores.
    pub fn identity(channels: usize) -> Self {
        let mut bn = BatchNorm::new(channels);
        bn.eps = 0.0;
        bn
    }

    fn check_batch(&self, batch: &[FeatureMap]) -> Result<(usize, usize), TensorError> {
        let first = batch.first().ok_or(TensorError::EmptyBatch)?;
        for m in batch {
            if m.shape() != first.shape() {
                return Err(TensorError::BatchShapeMismatch {
                    expected: first.shape(),
                    got: m.shape(),
                });
            }
        }
        if first.channels() != self.channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.channels,
                got: first.channels(),
            });
        }
        Ok((first.height(), first.width()))
    }

    /// Normalises with the batch mean and biased batch variance (computed
    /// over batch and spatial positions per channel), applies gamma/beta,
    /// blends the batch statistics into the running ones, and returns the
    /// saved statistics for the backward pass.
    pub fn forward_train(
        &mut self,
        batch: &[FeatureMap],
    ) -> Result<(Vec<FeatureMap>, BnSaved), TensorError> {
        let (h, w) = self.check_batch(batch)?;
        let n = (batch.len() * h * w) as f32;
        let mut mean = vec![0.0f32; self.channels];
        let mut var = vec![0.0f32; self.channels];
        for m in batch {
            for c in 0..self.channels {
                mean[c] += m.channel(c).iter().sum::<f32>();
            }
        }
        for v in &mut mean {
            *v /= n;
        }
        for m in batch {
            for c in 0..self.channels {
                let mu = mean[c];
                var[c] += m.channel(c).iter().map(|x| (x - mu) * (x - mu)).sum::<f32>();
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let invstd: Vec<f32> = var
            .iter()
            .map(|&v| 1.0 / libm::sqrtf(v + self.eps))
            .collect();
        let out = batch
            .iter()
            .map(|m| {
                FeatureMap::from_fn(self.channels, h, w, |c, y, x| {
                    self.gamma[c] * ((m.at(c, y, x) - mean[c]) * invstd[c]) + self.beta[c]
                })
            })
            .collect();
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }
        Ok((out, BnSaved { mean, invstd }))
    }

    /// Normalises a single map with the frozen running statistics.
    pub fn forward_eval(&self, input: &FeatureMap) -> Result<FeatureMap, TensorError> {
        if input.channels() != self.channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.channels,
                got: input.channels(),
            });
        }
        let scale: Vec<f32> = (0..self.channels)
            .map(|c| self.gamma[c] / libm::sqrtf(self.running_var[c] + self.eps))
            .collect();
        Ok(FeatureMap::from_fn(
            self.channels,
            input.height(),
            input.width(),
            |c, y, x| scale[c] * (input.at(c, y, x) - self.running_mean[c]) + self.beta[c],
        ))
    }

    /// Reverse-mode gradients through the training forward. Returns
    /// `(d_input, d_gamma, d_beta)`.
    pub fn grads(
        &self,
        batch: &[FeatureMap],
        saved: &BnSaved,
        d_out: &[FeatureMap],
    ) -> (Vec<FeatureMap>, Vec<f32>, Vec<f32>) {
        let (h, w) = (batch[0].height(), batch[0].width());
        let n = (batch.len() * h * w) as f32;
        let mut d_gamma = vec![0.0f32; self.channels];
        let mut d_beta = vec![0.0f32; self.channels];
        // Per-channel sums of dy and dy*xhat drive the closed-form input grad.
        let mut sum_dy = vec![0.0f32; self.channels];
        let mut sum_dy_xhat = vec![0.0f32; self.channels];
        for (m, g) in batch.iter().zip(d_out) {
            for c in 0..self.channels {
                for (x, dy) in m.channel(c).iter().zip(g.channel(c)) {
                    let xhat = (x - saved.mean[c]) * saved.invstd[c];
                    sum_dy[c] += dy;
                    sum_dy_xhat[c] += dy * xhat;
                }
            }
        }
        for c in 0..self.channels {
            d_gamma[c] = sum_dy_xhat[c];
            d_beta[c] = sum_dy[c];
        }
        let d_input = batch
            .iter()
            .zip(d_out)
            .map(|(m, g)| {
                FeatureMap::from_fn(self.channels, h, w, |c, y, x| {
                    let xhat = (m.at(c, y, x) - saved.mean[c]) * saved.invstd[c];
                    self.gamma[c] * saved.invstd[c] / n
                        * (n * g.at(c, y, x) - sum_dy[c] - xhat * sum_dy_xhat[c])
                })
            })
            .collect();
        (d_input, d_gamma, d_beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardised() {
        let mut bn = BatchNorm::new(1);
        let batch = vec![
            FeatureMap::from_vec(1, 1, 2, vec![1.0, 3.0]).unwrap(),
            FeatureMap::from_vec(1, 1, 2, vec![5.0, 7.0]).unwrap(),
        ];
        let (out, saved) = bn.forward_train(&batch).unwrap();
        // mean 4, biased var 5
        assert_eq!(saved.mean[0], 4.0);
        let inv = 1.0 / (5.0f32 + 1e-5).sqrt();
        assert!((saved.invstd[0] - inv).abs() < 1e-7);
        let got: Vec<f32> = out.iter().flat_map(|m| m.data().to_vec()).collect();
        let want: Vec<f32> = [1.0f32, 3.0, 5.0, 7.0].iter().map(|x| (x - 4.0) * inv).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        // running stats blended with momentum 0.1 from (0, 1)
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-6);
        assert!((bn.running_var[0] - (0.9 + 0.5)).abs() < 1e-6);
    }

    #[test]
    fn eval_applies_frozen_affine() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0 - 1e-5; // so sqrt(var+eps) = 2 exactly
        bn.gamma[0] = 3.0;
        bn.beta[0] = 1.0;
        let input = FeatureMap::from_vec(1, 1, 2, vec![2.0, 6.0]).unwrap();
        let out = bn.forward_eval(&input).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn identity_eval_is_exact() {
        let bn = BatchNorm::identity(2);
        let input = FeatureMap::from_vec(2, 1, 2, vec![0.3, -1.7, 0.0, 42.5]).unwrap();
        let out = bn.forward_eval(&input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn grads_match_finite_differences() {
        // Scalar FD in f64 on a tiny batch; rebuilds the forward independently.
        let base: Vec<f64> = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let gamma = 1.3f64;
        let beta = -0.2f64;
        let eps = 1e-5f64;
        let fwd_sum = |xs: &[f64]| -> f64 {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            // upstream grad is all-ones: loss = sum of outputs
            xs.iter().map(|x| gamma * (x - mean) * inv + beta).sum()
        };
        let mut bn = BatchNorm::new(1);
        bn.gamma[0] = gamma as f32;
        bn.beta[0] = beta as f32;
        let batch = vec![
            FeatureMap::from_vec(1, 1, 3, base[..3].iter().map(|&v| v as f32).collect()).unwrap(),
            FeatureMap::from_vec(1, 1, 3, base[3..].iter().map(|&v| v as f32).collect()).unwrap(),
        ];
        let (_, saved) = bn.forward_train(&batch).unwrap();
        let ones = vec![
            FeatureMap::from_vec(1, 1, 3, vec![1.0; 3]).unwrap(),
            FeatureMap::from_vec(1, 1, 3, vec![1.0; 3]).unwrap(),
        ];
        let (d_in, _, d_beta) = bn.grads(&batch, &saved, &ones);
        assert!((d_beta[0] - 6.0).abs() < 1e-6);
        for i in 0..6 {
            let h = 1e-5;
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (fwd_sum(&plus) - fwd_sum(&minus)) / (2.0 * h);
            let got = d_in[i / 3].data()[i % 3] as f64;
            assert!(
                (got - fd).abs() <= 1e-3 * fd.abs().max(1e-3),
                "elem {i}: analytic {got} vs fd {fd}"
            );
        }
    }
}

//! Valid-mode 2d convolution (with stride and channel groups) and the
//! sliding-window cross-correlation that turns two latent codes into a
//! response map.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{FeatureMap, TensorError};

/// One convolution's parameters. Weight layout is row-major
/// `(out_channel, in_channel_within_group, ky, kx)`, square kernels only.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    /// Zero-initialised layer; the backbone overwrites the weights at init.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self, TensorError> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(TensorError::GroupMismatch {
                in_channels,
                out_channels,
                groups,
            });
        }
        let in_per_group = in_channels / groups;
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            weight: vec![0.0; out_channels * in_per_group * kernel * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn check_input(&self, input: &FeatureMap) -> Result<(usize, usize), TensorError> {
        if input.channels() != self.in_channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.in_channels,
                got: input.channels(),
            });
        }
        if input.height() < self.kernel || input.width() < self.kernel {
            return Err(TensorError::KernelLargerThanInput {
                kernel: (self.kernel, self.kernel),
                input: (input.height(), input.width()),
            });
        }
        let out_h = (input.height() - self.kernel) / self.stride + 1;
        let out_w = (input.width() - self.kernel) / self.stride + 1;
        Ok((out_h, out_w))
    }

    /// Valid-mode output spatial size: `floor((in - k) / stride) + 1` per axis.
    pub fn output_shape(&self, input: &FeatureMap) -> Result<(usize, usize, usize), TensorError> {
        let (h, w) = self.check_input(input)?;
        Ok((self.out_channels, h, w))
    }

    /// Kernel-position-major accumulation; the inner loop walks a contiguous
    /// input row so it vectorises at stride 1.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap, TensorError> {
        let (out_h, out_w) = self.check_input(input)?;
        let mut out = FeatureMap::zeros(self.out_channels, out_h, out_w);
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let k = self.kernel;
        let s = self.stride;
        for o in 0..self.out_channels {
            let g = o / opg;
            {
                let b = self.bias[o];
                for v in out.channel_mut(o) {
                    *v = b;
                }
            }
            for ig in 0..ipg {
                let cin = g * ipg + ig;
                let in_plane = input.channel(cin);
                let w_base = ((o * ipg) + ig) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let w = self.weight[w_base + ky * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..out_h {
                            let in_row = &in_plane[(oy * s + ky) * input.width()..];
                            let out_row =
                                &mut out.channel_mut(o)[oy * out_w..(oy + 1) * out_w];
                            if s == 1 {
                                for (ov, iv) in out_row.iter_mut().zip(&in_row[kx..kx + out_w]) {
                                    *ov += w * iv;
                                }
                            } else {
                                for (ox, ov) in out_row.iter_mut().enumerate() {
                                    *ov += w * in_row[ox * s + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Textbook per-output-cell loop. Same contract as `forward`; kept as the
    /// in-crate cross-check for the optimised path.
    pub fn forward_naive(&self, input: &FeatureMap) -> Result<FeatureMap, TensorError> {
        let (out_h, out_w) = self.check_input(input)?;
        let mut out = FeatureMap::zeros(self.out_channels, out_h, out_w);
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let k = self.kernel;
        let s = self.stride;
        for o in 0..self.out_channels {
            let g = o / opg;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = self.bias[o];
                    for ig in 0..ipg {
                        let cin = g * ipg + ig;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += self.weight[((o * ipg + ig) * k + ky) * k + kx]
                                    * input.at(cin, oy * s + ky, ox * s + kx);
                            }
                        }
                    }
                    *out.at_mut(o, oy, ox) = acc;
                }
            }
        }
        Ok(out)
    }

    /// Reverse-mode gradients for one application: returns
    /// `(d_input, d_weight, d_bias)` given the upstream `d_out`.
    pub fn grads(
        &self,
        input: &FeatureMap,
        d_out: &FeatureMap,
    ) -> (FeatureMap, Vec<f32>, Vec<f32>) {
        let mut d_input = FeatureMap::zeros(input.channels(), input.height(), input.width());
        let mut d_weight = vec![0.0f32; self.weight.len()];
        let mut d_bias = vec![0.0f32; self.bias.len()];
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        let k = self.kernel;
        let s = self.stride;
        let (out_h, out_w) = (d_out.height(), d_out.width());
        for o in 0..self.out_channels {
            let g = o / opg;
            d_bias[o] = d_out.channel(o).iter().sum();
            for ig in 0..ipg {
                let cin = g * ipg + ig;
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * ipg + ig) * k + ky) * k + kx;
                        let w = self.weight[wi];
                        let mut dw = 0.0f32;
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let go = d_out.at(o, oy, ox);
                                dw += go * input.at(cin, oy * s + ky, ox * s + kx);
                                *d_input.at_mut(cin, oy * s + ky, ox * s + kx) += go * w;
                            }
                        }
                        d_weight[wi] += dw;
                    }
                }
            }
        }
        (d_input, d_weight, d_bias)
    }
}

/// Cross-correlation of a target code against a search code: slides the whole
/// target as a single kernel (no flip), stride 1, summing over all channels,
/// yielding a one-channel response map of side `search - target + 1`.
/// Entry (u,v) = sum over c,dy,dx of target[c,dy,dx] * search[c,u+dy,v+dx].
pub fn xcorr(target: &FeatureMap, search: &FeatureMap) -> Result<FeatureMap, TensorError> {
    if search.channels() != target.channels() {
        return Err(TensorError::ChannelMismatch {
            expected: target.channels(),
            got: search.channels(),
        });
    }
    if target.height() > search.height() || target.width() > search.width() {
        return Err(TensorError::TargetLargerThanSearch {
            target: (target.height(), target.width()),
            search: (search.height(), search.width()),
        });
    }
    let out_h = search.height() - target.height() + 1;
    let out_w = search.width() - target.width() + 1;
    let mut out = FeatureMap::zeros(1, out_h, out_w);
    for c in 0..search.channels() {
        let s_plane = search.channel(c);
        let t_plane = target.channel(c);
        for ky in 0..target.height() {
            let t_row = &t_plane[ky * target.width()..(ky + 1) * target.width()];
            for oy in 0..out_h {
                let s_row = &s_plane[(oy + ky) * search.width()..];
                let out_row = &mut out.channel_mut(0)[oy * out_w..(oy + 1) * out_w];
                for (ox, ov) in out_row.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (kx, tv) in t_row.iter().enumerate() {
                        acc += tv * s_row[ox + kx];
                    }
                    *ov += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `xcorr` with respect to both codes; returns
/// `(d_target, d_search)`.
pub fn xcorr_grads(
    target: &FeatureMap,
    search: &FeatureMap,
    d_out: &FeatureMap,
) -> (FeatureMap, FeatureMap) {
    let mut d_search = FeatureMap::zeros(search.channels(), search.height(), search.width());
    let mut d_target = FeatureMap::zeros(target.channels(), target.height(), target.width());
    for c in 0..search.channels() {
        for oy in 0..d_out.height() {
            for ox in 0..d_out.width() {
                let go = d_out.at(0, oy, ox);
                for ky in 0..target.height() {
                    for kx in 0..target.width() {
                        *d_search.at_mut(c, oy + ky, ox + kx) += go * target.at(c, ky, kx);
                        *d_target.at_mut(c, ky, kx) += go * search.at(c, oy + ky, ox + kx);
                    }
                }
            }
        }
    }
    (d_target, d_search)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(i: usize) -> f32 {
        ((i.wrapping_mul(2654435761)) % 2000) as f32 / 1000.0 - 1.0
    }

    fn filled(c: usize, h: usize, w: usize, salt: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |ci, y, x| pseudo(salt + (ci * h + y) * w + x))
    }

    #[test]
    fn one_by_one_kernel_scales_input() {
        let mut layer = ConvLayer::new(1, 1, 1, 1, 1).unwrap();
        layer.weight[0] = 2.0;
        layer.bias[0] = 0.5;
        let input = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.data(), &[2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn known_two_by_two() {
        let mut layer = ConvLayer::new(1, 1, 2, 1, 1).unwrap();
        layer.weight.copy_from_slice(&[1.0, 0.0, 0.0, -1.0]);
        let input =
            FeatureMap::from_vec(1, 3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
                .unwrap();
        // out[y][x] = in[y][x] - in[y+1][x+1]
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.shape(), (1, 2, 2));
        assert_eq!(out.data(), &[-4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn stride_two_shape() {
        let layer = ConvLayer::new(3, 16, 3, 2, 1).unwrap();
        let input = FeatureMap::zeros(3, 64, 64);
        assert_eq!(layer.output_shape(&input).unwrap(), (16, 31, 31));
        let input = FeatureMap::zeros(3, 128, 128);
        assert_eq!(layer.output_shape(&input).unwrap(), (16, 63, 63));
    }

    #[test]
    fn grouped_matches_block_diagonal_full() {
        let mut grouped = ConvLayer::new(4, 4, 3, 1, 2).unwrap();
        for (i, w) in grouped.weight.iter_mut().enumerate() {
            *w = pseudo(i);
        }
        for (i, b) in grouped.bias.iter_mut().enumerate() {
            *b = pseudo(900 + i);
        }
        // Full conv with zeros outside the two diagonal blocks.
        let mut full = ConvLayer::new(4, 4, 3, 1, 1).unwrap();
        full.bias.copy_from_slice(&grouped.bias);
        for o in 0..4 {
            let g = o / 2;
            for ig in 0..2 {
                let cin = g * 2 + ig;
                for t in 0..9 {
                    full.weight[(o * 4 + cin) * 9 + t] = grouped.weight[(o * 2 + ig) * 9 + t];
                }
            }
        }
        let input = filled(4, 6, 6, 17);
        let a = grouped.forward(&input).unwrap();
        let b = full.forward(&input).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn fast_and_naive_agree() {
        let mut layer = ConvLayer::new(3, 5, 3, 2, 1).unwrap();
        for (i, w) in layer.weight.iter_mut().enumerate() {
            *w = pseudo(i + 31);
        }
        for (i, b) in layer.bias.iter_mut().enumerate() {
            *b = pseudo(i + 777);
        }
        let input = filled(3, 11, 9, 5);
        let fast = layer.forward(&input).unwrap();
        let naive = layer.forward_naive(&input).unwrap();
        assert_eq!(fast.shape(), naive.shape());
        for (a, b) in fast.data().iter().zip(naive.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn xcorr_peaks_at_embedded_copy() {
        let target = filled(2, 3, 3, 99);
        let mut search = FeatureMap::zeros(2, 8, 8);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    *search.at_mut(c, 4 + y, 2 + x) = target.at(c, y, x);
                }
            }
        }
        let resp = xcorr(&target, &search).unwrap();
        assert_eq!(resp.shape(), (1, 6, 6));
        let (_, (_, y, x)) = resp.argmax();
        assert_eq!((y, x), (4, 2));
    }

    #[test]
    fn xcorr_matches_conv_with_target_as_kernel() {
        let search = filled(3, 7, 7, 1);
        let target = filled(3, 4, 4, 2);
        let resp = xcorr(&target, &search).unwrap();
        let mut layer = ConvLayer::new(3, 1, 4, 1, 1).unwrap();
        layer.weight.copy_from_slice(target.data());
        let conv = layer.forward_naive(&search).unwrap();
        for (a, b) in resp.data().iter().zip(conv.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn xcorr_rejects_shape_misuse() {
        let search = FeatureMap::zeros(2, 4, 4);
        let wrong_channels = FeatureMap::zeros(3, 2, 2);
        assert!(matches!(
            xcorr(&wrong_channels, &search),
            Err(TensorError::ChannelMismatch { .. })
        ));
        let too_big = FeatureMap::zeros(2, 5, 5);
        assert!(matches!(
            xcorr(&too_big, &search),
            Err(TensorError::TargetLargerThanSearch { .. })
        ));
    }
}

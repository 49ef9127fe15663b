//! The shared-weight embedding network applied to exemplar and search
//! patches. One parameter set serves both branches; sharing is structural.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{xcorr, ConvLayer};
use crate::norm::BatchNorm;
use crate::tape::{BufId, GradTape, ParamId, TapeError};
use crate::tensor::{relu, FeatureMap, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Channel progression input -> blocks; length = block count + 1.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: alloc::vec![3, 16, 32, 32, 64],
            kernel: 3,
            strides: alloc::vec![2, 2, 2, 1],
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub conv: ConvLayer,
    pub bn: BatchNorm,
    pub relu: bool,
}

/// Fully convolutional, valid mode throughout, so response-map cells map to
/// integer pixel offsets of `total_stride`. The final block keeps its
/// batchnorm but omits the nonlinearity so codes stay signed.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<Block>,
    kernel: usize,
}

/// Trainable tensors per block: conv weight, conv bias, bn gamma, bn beta.
pub const PARAMS_PER_BLOCK: usize = 4;

impl Backbone {
    /// Fan-in-scaled uniform init (bound sqrt(6/fan_in)), zero biases,
    /// default batchnorm state; deterministic in the config seed.
    pub fn new(cfg: &BackboneConfig) -> Result<Backbone, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_blocks = cfg.strides.len();
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let mut conv = ConvLayer::new(
                cfg.channels[i],
                cfg.channels[i + 1],
                cfg.kernel,
                cfg.strides[i],
                1,
            )?;
            let fan_in = (cfg.channels[i] * cfg.kernel * cfg.kernel) as f32;
            let bound = libm::sqrtf(6.0 / fan_in);
            for w in &mut conv.weight {
                *w = (rng.random::<f32>() * 2.0 - 1.0) * bound;
            }
            blocks.push(Block {
                conv,
                bn: BatchNorm::new(cfg.channels[i + 1]),
                relu: i + 1 < n_blocks,
            });
        }
        Ok(Backbone {
            blocks,
            kernel: cfg.kernel,
        })
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.conv.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.out_channels).unwrap_or(0)
    }

    /// Spatial side of the code for a square input of the given side.
    pub fn code_side(&self, input_side: usize) -> Result<usize, TensorError> {
        let mut side = input_side;
        for b in &self.blocks {
            if side < self.kernel {
                return Err(TensorError::KernelLargerThanInput {
                    kernel: (self.kernel, self.kernel),
                    input: (side, side),
                });
            }
            side = (side - self.kernel) / b.conv.stride + 1;
        }
        Ok(side)
    }

    /// Eval-mode embedding: conv -> frozen batchnorm -> relu per block.
    pub fn embed(&self, patch: &FeatureMap) -> Result<FeatureMap, TensorError> {
        let mut x = self.blocks[0].conv.forward(patch)?;
        x = self.blocks[0].bn.forward_eval(&x)?;
        if self.blocks[0].relu {
            x = relu(&x);
        }
        for b in &self.blocks[1..] {
            x = b.conv.forward(&x)?;
            x = b.bn.forward_eval(&x)?;
            if b.relu {
                x = relu(&x);
            }
        }
        Ok(x)
    }

    /// Raw correlation response of a precomputed exemplar code against a
    /// search patch.
    pub fn response(
        &self,
        exemplar_code: &FeatureMap,
        search_patch: &FeatureMap,
    ) -> Result<FeatureMap, TensorError> {
        let search_code = self.embed(search_patch)?;
        xcorr(exemplar_code, &search_code)
    }

    /// Train-mode embedding recorded on a tape. `base_param` is the id of
    /// this backbone's first tensor (block 0 conv weight) in the caller's
    /// registry, or None to treat the backbone as frozen (no gradients).
    /// Batchnorm running statistics update either way.
    pub fn tape_embed(
        &mut self,
        tape: &mut GradTape,
        x: BufId,
        base_param: Option<ParamId>,
    ) -> Result<BufId, TapeError> {
        let mut cur = x;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let ids = base_param.map(|base| base + i * PARAMS_PER_BLOCK);
            cur = tape.conv(&b.conv, ids, ids.map(|v| v + 1), cur)?;
            cur = tape.batchnorm(&mut b.bn, ids.map(|v| v + 2), ids.map(|v| v + 3), cur)?;
            if b.relu {
                cur = tape.relu(cur);
            }
        }
        Ok(cur)
    }

    pub fn n_params(&self) -> usize {
        self.blocks.len() * PARAMS_PER_BLOCK
    }

    /// Trainable tensors in registry order (per block: conv weight, conv
    /// bias, bn gamma, bn beta). The same order everywhere: tape ids,
    /// optimizer slots, serialization.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in &mut self.blocks {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Backbone {
        Backbone::new(&BackboneConfig::default()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let bb = toy();
        assert_eq!(bb.total_stride(), 8);
        assert_eq!(bb.out_channels(), 64);
        // valid-mode arithmetic: 64 -> 31 -> 15 -> 7 -> 5; 128 -> 63 -> 31 -> 15 -> 13
        assert_eq!(bb.code_side(64).unwrap(), 5);
        assert_eq!(bb.code_side(128).unwrap(), 13);
        let code = bb.embed(&FeatureMap::zeros(3, 64, 64)).unwrap();
        assert_eq!(code.shape(), (64, 5, 5));
        let search = bb.embed(&FeatureMap::zeros(3, 128, 128)).unwrap();
        assert_eq!(search.shape(), (64, 13, 13));
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let bb = toy();
        let code = bb.embed(&FeatureMap::zeros(3, 64, 64)).unwrap();
        assert!(code.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = toy();
        let b = toy();
        let img = FeatureMap::from_fn(3, 64, 64, |c, y, x| {
            ((c * 31 + y * 7 + x * 13) % 97) as f32 / 97.0
        });
        assert_eq!(a.embed(&img).unwrap(), b.embed(&img).unwrap());
        let mut cfg = BackboneConfig::default();
        cfg.seed = 43;
        let c = Backbone::new(&cfg).unwrap();
        assert_ne!(a.embed(&img).unwrap(), c.embed(&img).unwrap());
    }

    #[test]
    fn weight_sharing_moves_both_branches() {
        let mut bb = toy();
        let exemplar = FeatureMap::from_fn(3, 64, 64, |c, y, x| ((c + y + x) % 11) as f32 / 11.0);
        let search = FeatureMap::from_fn(3, 128, 128, |c, y, x| ((c + 2 * y + x) % 13) as f32 / 13.0);
        let e0 = bb.embed(&exemplar).unwrap();
        let s0 = bb.embed(&search).unwrap();
        bb.blocks[1].conv.weight[0] += 0.25;
        let e1 = bb.embed(&exemplar).unwrap();
        let s1 = bb.embed(&search).unwrap();
        assert_ne!(e0, e1);
        assert_ne!(s0, s1);
    }

    #[test]
    fn stride_aligned_translation_equivariance() {
        let bb = toy();
        let stride = bb.total_stride();
        // img2 content = img1 shifted right by one total stride
        let tex = |c: usize, y: usize, x: usize| ((c * 37 + y * 17 + x * 29) % 101) as f32 / 101.0;
        let img1 = FeatureMap::from_fn(3, 72, 72, |c, y, x| tex(c, y, x));
        let img2 = FeatureMap::from_fn(3, 72, 72, |c, y, x| {
            if x >= stride {
                tex(c, y, x - stride)
            } else {
                0.0
            }
        });
        let c1 = bb.embed(&img1).unwrap();
        let c2 = bb.embed(&img2).unwrap();
        assert_eq!(c1.shape(), c2.shape());
        // shifted content appears one cell to the right, bit-exactly
        for c in 0..c1.channels() {
            for y in 0..c1.height() {
                for x in 1..c1.width() {
                    assert_eq!(c2.at(c, y, x), c1.at(c, y, x - 1), "cell ({c},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn response_peaks_on_embedded_exemplar() {
        let bb = toy();
        // search = black canvas with the exemplar pasted at a known offset
        let tex = |c: usize, y: usize, x: usize| ((c * 7 + y * 3 + x * 5) % 23) as f32 / 23.0;
        let exemplar = FeatureMap::from_fn(3, 64, 64, |c, y, x| tex(c, y, x));
        let (oy, ox) = (32, 40); // stride-aligned placement
        let search = FeatureMap::from_fn(3, 128, 128, |c, y, x| {
            if y >= oy && y < oy + 64 && x >= ox && x < ox + 64 {
                tex(c, y - oy, x - ox)
            } else {
                0.0
            }
        });
        let code = bb.embed(&exemplar).unwrap();
        let resp = bb.response(&code, &search).unwrap();
        assert_eq!(resp.shape(), (1, 9, 9));
        let (_, (_, py, px)) = resp.argmax();
        assert_eq!((py, px), (oy / 8, ox / 8));
    }
}

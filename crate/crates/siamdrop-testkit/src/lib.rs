//! f64 reference implementations of every numeric operation in the product
//! crate, written as plain textbook loops with no shared code, plus a
//! central-difference harness. Test-only; nothing here ships.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamdrop_core::{BackboneConfig, DropoutMask, FeatureMap};

/// Rank-3 f64 tensor, same (channel, row, col) layout as `FeatureMap`.
#[derive(Clone, Debug)]
pub struct Vol {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Vol {
    pub fn zeros(c: usize, h: usize, w: usize) -> Vol {
        Vol {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn from_map(m: &FeatureMap) -> Vol {
        Vol {
            c: m.channels(),
            h: m.height(),
            w: m.width(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Valid-mode grouped convolution, one output cell at a time.
pub fn conv2d_ref(
    x: &Vol,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Vol {
    let ipg = x.c / groups;
    let opg = out_channels / groups;
    let oh = (x.h - kernel) / stride + 1;
    let ow = (x.w - kernel) / stride + 1;
    let mut out = Vol::zeros(out_channels, oh, ow);
    for o in 0..out_channels {
        let g = o / opg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for ig in 0..ipg {
                    let cin = g * ipg + ig;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += weight[((o * ipg + ig) * kernel + ky) * kernel + kx]
                                * x.at(cin, oy * stride + ky, ox * stride + kx);
                        }
                    }
                }
                *out.at_mut(o, oy, ox) = acc;
            }
        }
    }
    out
}

/// Sliding-window correlation of the whole target code over the search code,
/// summing all channels into one plane.
pub fn xcorr_ref(target: &Vol, search: &Vol) -> Vol {
    let oh = search.h - target.h + 1;
    let ow = search.w - target.w + 1;
    let mut out = Vol::zeros(1, oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for c in 0..target.c {
                for ky in 0..target.h {
                    for kx in 0..target.w {
                        acc += target.at(c, ky, kx) * search.at(c, oy + ky, ox + kx);
                    }
                }
            }
            *out.at_mut(0, oy, ox) = acc;
        }
    }
    out
}

/// Train-mode batch normalisation: per-channel mean and biased variance over
/// batch and space, then scale and shift.
pub fn bn_train_ref(batch: &[Vol], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<Vol> {
    let (c, h, w) = (batch[0].c, batch[0].h, batch[0].w);
    let n = (batch.len() * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for m in batch {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    mean[ch] += m.at(ch, y, x);
                }
            }
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    for m in batch {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = m.at(ch, y, x) - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
    }
    for v in &mut var {
        *v /= n;
    }
    batch
        .iter()
        .map(|m| {
            let mut out = Vol::zeros(c, h, w);
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(ch, y, x) =
                            gamma[ch] * (m.at(ch, y, x) - mean[ch]) * inv + beta[ch];
                    }
                }
            }
            out
        })
        .collect()
}

/// Eval-mode batch normalisation with frozen statistics.
pub fn bn_eval_ref(
    x: &Vol,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vol {
    let mut out = Vol::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        for y in 0..x.h {
            for xx in 0..x.w {
                *out.at_mut(c, y, xx) = gamma[c] * (x.at(c, y, xx) - mean[c]) * inv + beta[c];
            }
        }
    }
    out
}

pub fn relu_ref(x: &Vol) -> Vol {
    Vol {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

pub fn softplus_ref(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Class-balanced logistic loss over a batch of single-channel responses
/// against ±1 label maps; positive and negative cells carry 0.5 mass each
/// per sample, samples averaged.
pub fn balanced_loss_ref(resp: &[Vol], labels: &[Vol]) -> f64 {
    let mut total = 0.0;
    for (r, l) in resp.iter().zip(labels) {
        let n_pos = l.data.iter().filter(|&&y| y > 0.0).count().max(1);
        let n_neg = l.data.iter().filter(|&&y| y < 0.0).count().max(1);
        let w_pos = 0.5 / n_pos as f64;
        let w_neg = 0.5 / n_neg as f64;
        for (&v, &y) in r.data.iter().zip(&l.data) {
            let w = if y > 0.0 { w_pos } else { w_neg };
            total += w * softplus_ref(-y * v);
        }
    }
    total / resp.len() as f64
}

/// Zero out the cells a dropout mask drops.
pub fn mask_ref(mask: &DropoutMask, x: &Vol) -> Vol {
    let mut out = x.clone();
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                if !mask.keep_bit(c, y, xx) {
                    *out.at_mut(c, y, xx) = 0.0;
                }
            }
        }
    }
    out
}

/// Intersection-over-union of two (x, y, w, h) boxes.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Shape of one conv+norm block; `relu` marks whether a nonlinearity follows.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

pub fn backbone_specs(cfg: &BackboneConfig) -> Vec<BlockSpec> {
    let n = cfg.strides.len();
    (0..n)
        .map(|i| BlockSpec {
            in_c: cfg.channels[i],
            out_c: cfg.channels[i + 1],
            kernel: cfg.kernel,
            stride: cfg.strides[i],
            relu: i + 1 < n,
        })
        .collect()
}

/// The response encoder is structurally two 1x1 blocks.
pub fn head_specs(n_inputs: usize, hidden: usize) -> Vec<BlockSpec> {
    vec![
        BlockSpec {
            in_c: n_inputs,
            out_c: hidden,
            kernel: 1,
            stride: 1,
            relu: true,
        },
        BlockSpec {
            in_c: hidden,
            out_c: 1,
            kernel: 1,
            stride: 1,
            relu: false,
        },
    ]
}

/// Train-mode pass of a conv/norm/relu stack over a batch. `params` holds
/// four tensors per block (conv weight, conv bias, gamma, beta) in the same
/// order the product's parameter registry uses.
pub fn stack_train_ref(specs: &[BlockSpec], params: &[Vec<f64>], batch: &[Vol], eps: f64) -> Vec<Vol> {
    let mut cur: Vec<Vol> = batch.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        let w = &params[4 * i];
        let b = &params[4 * i + 1];
        let gamma = &params[4 * i + 2];
        let beta = &params[4 * i + 3];
        cur = cur
            .iter()
            .map(|m| conv2d_ref(m, w, b, spec.out_c, spec.kernel, spec.stride, 1))
            .collect();
        cur = bn_train_ref(&cur, gamma, beta, eps);
        if spec.relu {
            cur = cur.iter().map(relu_ref).collect();
        }
    }
    cur
}

/// f64 mirror of the backbone-pretrain step's loss: embed both batches with
/// shared weights, correlate pairwise, scale, balanced loss.
pub fn pretrain_loss_ref(
    specs: &[BlockSpec],
    params: &[Vec<f64>],
    z: &[Vol],
    x: &[Vol],
    labels: &[Vol],
    scale: f64,
    eps: f64,
) -> f64 {
    let zc = stack_train_ref(specs, params, z, eps);
    let xc = stack_train_ref(specs, params, x, eps);
    let resp: Vec<Vol> = zc
        .iter()
        .zip(&xc)
        .map(|(t, s)| {
            let mut r = xcorr_ref(t, s);
            for v in &mut r.data {
                *v *= scale;
            }
            r
        })
        .collect();
    balanced_loss_ref(&resp, labels)
}

/// f64 mirror of the joint step's loss: embed, apply every mask to the
/// exemplar code, correlate each masked code, stack per sample (slot order),
/// run the encoder stack, balanced loss. `params` is the backbone's four
/// tensors per block followed by the head's eight.
pub fn joint_loss_ref(
    bb_specs: &[BlockSpec],
    head_specs: &[BlockSpec],
    params: &[Vec<f64>],
    masks: &[DropoutMask],
    z: &[Vol],
    x: &[Vol],
    labels: &[Vol],
    eps: f64,
) -> f64 {
    let n_bb = 4 * bb_specs.len();
    let zc = stack_train_ref(bb_specs, &params[..n_bb], z, eps);
    let xc = stack_train_ref(bb_specs, &params[..n_bb], x, eps);
    let mut stacks = Vec::with_capacity(z.len());
    for (t, s) in zc.iter().zip(&xc) {
        let per_mask: Vec<Vol> = masks
            .iter()
            .map(|m| xcorr_ref(&mask_ref(m, t), s))
            .collect();
        let (h, w) = (per_mask[0].h, per_mask[0].w);
        let mut st = Vol::zeros(masks.len(), h, w);
        for (i, r) in per_mask.iter().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    *st.at_mut(i, y, xx) = r.at(0, y, xx);
                }
            }
        }
        stacks.push(st);
    }
    let out = stack_train_ref(head_specs, &params[n_bb..], &stacks, eps);
    balanced_loss_ref(&out, labels)
}

/// f64 mirror of the head-only step: the stacks are fixed inputs.
pub fn head_loss_ref(
    specs: &[BlockSpec],
    params: &[Vec<f64>],
    stacks: &[Vol],
    labels: &[Vol],
    eps: f64,
) -> f64 {
    let out = stack_train_ref(specs, params, stacks, eps);
    balanced_loss_ref(&out, labels)
}

/// Central difference of `loss` in one parameter coordinate.
pub fn central_diff(
    mut loss: impl FnMut(&[Vec<f64>]) -> f64,
    params: &mut [Vec<f64>],
    tensor: usize,
    elem: usize,
    h: f64,
) -> f64 {
    let orig = params[tensor][elem];
    params[tensor][elem] = orig + h;
    let up = loss(params);
    params[tensor][elem] = orig - h;
    let down = loss(params);
    params[tensor][elem] = orig;
    (up - down) / (2.0 * h)
}

/// Relative agreement with an absolute floor for near-zero pairs.
pub fn grad_close(fd: f64, analytic: f64, rtol: f64, atol: f64) -> bool {
    (fd - analytic).abs() <= rtol * fd.abs().max(analytic.abs()) + atol
}

/// Largest elementwise |a - b| / max(|b|, floor) between an f32 result and
/// its f64 reference.
pub fn max_rel_err(got: &[f32], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch in comparison");
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

pub fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(lo..hi))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random ±1 label map with at least one positive and one negative cell.
pub fn rand_label(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FeatureMap {
    loop {
        let m = FeatureMap::from_fn(1, h, w, |_, _, _| {
            if rng.random_range(0.0..1.0f32) < 0.2 {
                1.0
            } else {
                -1.0
            }
        });
        let pos = m.data().iter().filter(|&&v| v > 0.0).count();
        if pos > 0 && pos < m.len() {
            return m;
        }
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

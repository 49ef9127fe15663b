//! Turning per-mask response maps into a single box prediction.
//!
//! Two regimes: explicit combiners pick one decoded candidate per forward
//! pass and select among them (cluster vote for channel-style masks, scaled
//! score for patch-style masks); the encoder head fuses the raw response
//! stack with a small learned network before decoding once.

use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::conv::ConvLayer;
use crate::dropout::DropoutMask;
use crate::norm::BatchNorm;
use crate::tape::{BufId, GradTape, ParamId, TapeError};
use crate::tensor::{FeatureMap, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub score: f32,
    /// Set when the response carried no signal (all cells equal); the box is
    /// then the motion-model carry-over, not a measurement.
    pub degenerate: bool,
}

/// One dropout pass: the raw correlation response, the mask that produced
/// it, and the box decoded from it in isolation.
#[derive(Clone, Debug)]
pub struct PassOutput {
    pub response: FeatureMap,
    pub mask: DropoutMask,
    pub decoded: Prediction,
}

/// Everything needed to map a response-map cell to a frame-pixel box.
#[derive(Clone, Copy, Debug)]
pub struct DecodeGeom {
    /// Upsampling factor applied to the response before peak picking.
    pub up: usize,
    /// Cosine window blend weight; 0 disables the window.
    pub window_weight: f32,
    /// Backbone total stride in input-patch pixels per response cell.
    pub total_stride: usize,
    /// Side of the resampled search patch in network pixels.
    pub search_size: usize,
    /// Side of the search window in frame pixels at the decoded scale.
    pub search_side_px: f32,
    pub prev_center: (f32, f32),
    pub prev_size: (f32, f32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CombineError {
    EmptyPasses,
    /// Pass count does not match the encoder head input width.
    CountMismatch { expected: usize, got: usize },
    NotSingleChannel { channels: usize },
    SpatialMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A patch-style pass dropped its whole grid; the score rescale 1/(1-a)
    /// is undefined at a = 1.
    MaskFullyDropped { index: usize },
    ZeroUpsample,
    Shape(TensorError),
}

impl fmt::Display for CombineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombineError::EmptyPasses => write!(f, "no passes to combine"),
            CombineError::CountMismatch { expected, got } => {
                write!(f, "encoder head expects {expected} responses, got {got}")
            }
            CombineError::NotSingleChannel { channels } => {
                write!(f, "response must be single-channel, got {channels}")
            }
            CombineError::SpatialMismatch { expected, got } => write!(
                f,
                "response shapes differ: {}x{} vs {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            CombineError::MaskFullyDropped { index } => {
                write!(f, "pass {index} dropped every element; score rescale undefined")
            }
            CombineError::ZeroUpsample => write!(f, "upsample factor must be at least 1"),
            CombineError::Shape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for CombineError {}

impl From<TensorError> for CombineError {
    fn from(e: TensorError) -> Self {
        CombineError::Shape(e)
    }
}

fn catmull_weights(t: f32) -> [f32; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t + t2 - 0.5 * t3,
        1.0 - 2.5 * t2 + 1.5 * t3,
        0.5 * t + 2.0 * t2 - 1.5 * t3,
        -0.5 * t2 + 0.5 * t3,
    ]
}

/// Separable Catmull-Rom upsampling of a single-channel map. Output side is
/// (side-1)*up + 1 with endpoints aligned, so original cells survive exactly.
/// Border taps clamp to the edge.
pub fn upsample_bicubic(map: &FeatureMap, up: usize) -> Result<FeatureMap, CombineError> {
    if up == 0 {
        return Err(CombineError::ZeroUpsample);
    }
    if map.channels() != 1 {
        return Err(CombineError::NotSingleChannel {
            channels: map.channels(),
        });
    }
    let (_, h, w) = map.shape();
    let oh = (h - 1) * up + 1;
    let ow = (w - 1) * up + 1;
    let clamp = |i: i64, n: usize| -> usize { i.clamp(0, n as i64 - 1) as usize };
    // rows first: h x ow intermediate
    let mut rows = vec![0.0f32; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let base = (ox / up) as i64;
            let t = (ox % up) as f32 / up as f32;
            let wts = catmull_weights(t);
            let mut acc = 0.0;
            for (k, wt) in wts.iter().enumerate() {
                acc += wt * map.at(0, y, clamp(base + k as i64 - 1, w));
            }
            rows[y * ow + ox] = acc;
        }
    }
    let mut out = FeatureMap::zeros(1, oh, ow);
    for oy in 0..oh {
        let base = (oy / up) as i64;
        let t = (oy % up) as f32 / up as f32;
        let wts = catmull_weights(t);
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, wt) in wts.iter().enumerate() {
                acc += wt * rows[clamp(base + k as i64 - 1, h) * ow + ox];
            }
            *out.at_mut(0, oy, ox) = acc;
        }
    }
    Ok(out)
}

/// Multiplicative cosine window on an n-point grid: (1-w) + w * hann2d.
/// Weight 0 is the constant 1.
pub fn cosine_window(n: usize, weight: f32) -> FeatureMap {
    let hann1 = |i: usize| -> f32 {
        if n < 2 {
            return 1.0;
        }
        let phase = 2.0 * core::f32::consts::PI * i as f32 / (n - 1) as f32;
        0.5 - 0.5 * libm::cosf(phase)
    };
    FeatureMap::from_fn(1, n, n, |_, y, x| {
        (1.0 - weight) + weight * hann1(y) * hann1(x)
    })
}

/// Decodes one response map to a box. The map is upsampled, windowed toward
/// the previous position, and the peak displacement is mapped back through
/// the stride and crop scale. A flat response (no signal at all, checked
/// before windowing) keeps the previous box and sets the degenerate flag.
pub fn decode(response: &FeatureMap, geom: &DecodeGeom) -> Result<Prediction, CombineError> {
    if response.channels() != 1 {
        return Err(CombineError::NotSingleChannel {
            channels: response.channels(),
        });
    }
    let data = response.data();
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (cx, cy) = geom.prev_center;
    let (bw, bh) = geom.prev_size;
    if lo == hi {
        return Ok(Prediction {
            bbox: BBox::new(cx - bw / 2.0, cy - bh / 2.0, bw, bh),
            score: lo,
            degenerate: true,
        });
    }
    let up = upsample_bicubic(response, geom.up)?;
    let (_, uh, uw) = up.shape();
    debug_assert_eq!(uh, uw);
    let ulo = up.data().iter().copied().fold(f32::INFINITY, f32::min);
    let uhi = up.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = uhi - ulo;
    let window = cosine_window(uh, geom.window_weight);
    // localization blends the [0,1]-normalized map with the window prior, so
    // the argmax is invariant to the response's gain and offset; raw
    // correlation maps and batch-normalized head outputs get the same pull
    // toward the previous position. `window` carries its own constant (1-w)
    // term, which the argmax ignores.
    let blended = FeatureMap::from_fn(1, uh, uw, |_, y, x| {
        (1.0 - geom.window_weight) * (up.at(0, y, x) - ulo) / span + window.at(0, y, x)
    });
    let (_, (_, py, px)) = blended.argmax();
    // the reported score stays in the response's own units: combiners and
    // scale selection compare it across passes and scales
    let score = up.at(0, py, px);
    let mid = (uh - 1) as f32 / 2.0;
    let cells_y = (py as f32 - mid) / geom.up as f32;
    let cells_x = (px as f32 - mid) / geom.up as f32;
    let px_per_cell = geom.total_stride as f32 * geom.search_side_px / geom.search_size as f32;
    let nx = cx + cells_x * px_per_cell;
    let ny = cy + cells_y * px_per_cell;
    Ok(Prediction {
        bbox: BBox::new(nx - bw / 2.0, ny - bh / 2.0, bw, bh),
        score,
        degenerate: false,
    })
}

/// Consensus pick for channel-style masks. Candidates cluster greedily by
/// box overlap: walk candidates in score order, seed a cluster with the best
/// unassigned one, absorb every unassigned candidate whose IoU with the seed
/// exceeds `alpha`. The largest cluster wins (ties: higher best-member
/// score, then lower pass index) and contributes its best-scoring member.
pub fn combine_channel_explicit(
    passes: &[PassOutput],
    alpha: f64,
) -> Result<Prediction, CombineError> {
    if passes.is_empty() {
        return Err(CombineError::EmptyPasses);
    }
    let mut order: Vec<usize> = (0..passes.len()).collect();
    order.sort_by(|&i, &j| {
        passes[j]
            .decoded
            .score
            .partial_cmp(&passes[i].decoded.score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut assigned = vec![false; passes.len()];
    // (member indices, seed index); members stay in score order
    let mut clusters: Vec<(Vec<usize>, usize)> = Vec::new();
    for &seed in &order {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let mut members = vec![seed];
        let seed_box = passes[seed].decoded.bbox;
        for &other in &order {
            if assigned[other] {
                continue;
            }
            if seed_box.iou(&passes[other].decoded.bbox) > alpha {
                assigned[other] = true;
                members.push(other);
            }
        }
        clusters.push((members, seed));
    }
    let winner = clusters
        .iter()
        .max_by(|a, b| {
            let (sa, sb) = (passes[a.1].decoded.score, passes[b.1].decoded.score);
            a.0.len()
                .cmp(&b.0.len())
                .then(sa.partial_cmp(&sb).unwrap_or(core::cmp::Ordering::Equal))
                .then(b.1.cmp(&a.1))
        })
        .expect("at least one cluster");
    // best member by score, lower index on ties: first of the ordered walk
    let best = winner.0[0];
    Ok(passes[best].decoded)
}

/// Score-rescaled pick for patch-style masks: each pass competes with
/// s* = b / (1 - a) * s where a is its mask's dropped fraction (identity
/// passes use a = 0). Highest s* wins, first index on ties. The winning
/// prediction is reported with its rescaled score.
pub fn combine_patch_explicit(passes: &[PassOutput], b: f64) -> Result<Prediction, CombineError> {
    if passes.is_empty() {
        return Err(CombineError::EmptyPasses);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, pass) in passes.iter().enumerate() {
        let a = pass.mask.dropped_fraction();
        if a >= 1.0 {
            return Err(CombineError::MaskFullyDropped { index: i });
        }
        let s_star = b / (1.0 - a) * pass.decoded.score as f64;
        if best.map_or(true, |(_, s)| s_star > s) {
            best = Some((i, s_star));
        }
    }
    let (idx, s_star) = best.expect("non-empty");
    let mut pred = passes[idx].decoded;
    pred.score = s_star as f32;
    Ok(pred)
}

/// Learned aggregation over a fixed-size response stack: 1x1 conv to 4
/// channels, batch norm, ReLU, 1x1 conv to 1 channel, batch norm.
#[derive(Clone, Debug)]
pub struct EncoderHead {
    pub conv1: ConvLayer,
    pub bn1: BatchNorm,
    pub conv2: ConvLayer,
    pub bn2: BatchNorm,
}

pub const HEAD_HIDDEN: usize = 4;

impl EncoderHead {
    /// Random init over an n-response stack. Weights are He-uniform.
    pub fn new(n: usize, seed: u64) -> Result<Self, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv1 = ConvLayer::new(n, HEAD_HIDDEN, 1, 1, 1)?;
        let mut conv2 = ConvLayer::new(HEAD_HIDDEN, 1, 1, 1, 1)?;
        for c in [&mut conv1, &mut conv2] {
            let fan_in = c.in_channels * c.kernel * c.kernel;
            let bound = libm::sqrtf(6.0 / fan_in as f32);
            for w in c.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(EncoderHead {
            conv1,
            bn1: BatchNorm::new(HEAD_HIDDEN),
            conv2,
            bn2: BatchNorm::new(1),
        })
    }

    /// A head that passes channel 0 of the stack through unchanged, exactly.
    /// The first conv splits the channel into +x and -x, ReLU keeps the
    /// positive part of each, and the second conv takes their difference;
    /// both norms are exact eval-mode identities. Every arithmetic step is
    /// an f32 identity, so output bits match input bits.
    pub fn identity(n: usize) -> Result<Self, TensorError> {
        let mut conv1 = ConvLayer::new(n, HEAD_HIDDEN, 1, 1, 1)?;
        conv1.weight[0] = 1.0; // out 0 <- in 0
        conv1.weight[n] = -1.0; // out 1 <- in 0
        let mut conv2 = ConvLayer::new(HEAD_HIDDEN, 1, 1, 1, 1)?;
        conv2.weight[0] = 1.0;
        conv2.weight[1] = -1.0;
        Ok(EncoderHead {
            conv1,
            bn1: BatchNorm::identity(HEAD_HIDDEN),
            conv2,
            bn2: BatchNorm::identity(1),
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.conv1.in_channels
    }

    /// Inference pass over one stacked response. Batch norms use running
    /// statistics.
    pub fn forward_eval(&self, stack: &FeatureMap) -> Result<FeatureMap, TensorError> {
        let h = self.conv1.forward(stack)?;
        let h = self.bn1.forward_eval(&h)?;
        let h = crate::tensor::relu(&h);
        let out = self.conv2.forward(&h)?;
        self.bn2.forward_eval(&out)
    }

    /// Parameter count for optimizer registration: conv weight and bias,
    /// gamma and beta per norm.
    pub fn n_params() -> usize {
        8
    }

    /// Mutable parameter slots in tape registration order.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]
    }

    /// Training-mode pass recorded on a tape. Parameter ids start at
    /// `base_param` in the order conv1 w, conv1 b, bn1 gamma, bn1 beta,
    /// conv2 w, conv2 b, bn2 gamma, bn2 beta; None trains batch norms
    /// without registering gradients (frozen weights).
    pub fn tape_forward(
        &mut self,
        tape: &mut GradTape,
        x: BufId,
        base_param: Option<ParamId>,
    ) -> Result<BufId, TapeError> {
        let id = |k: usize| base_param.map(|b| b + k);
        let h = tape.conv(&self.conv1, id(0), id(1), x)?;
        let h = tape.batchnorm(&mut self.bn1, id(2), id(3), h)?;
        let h = tape.relu(h);
        let out = tape.conv(&self.conv2, id(4), id(5), h)?;
        tape.batchnorm(&mut self.bn2, id(6), id(7), out)
    }
}

/// Stacks n single-channel responses into one n-channel map, preserving
/// argument order (the head learns positional meaning per mask slot).
pub fn stack_responses(maps: &[FeatureMap]) -> Result<FeatureMap, CombineError> {
    if maps.is_empty() {
        return Err(CombineError::EmptyPasses);
    }
    let (_, h, w) = maps[0].shape();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.channels() != 1 {
            return Err(CombineError::NotSingleChannel {
                channels: m.channels(),
            });
        }
        if (m.height(), m.width()) != (h, w) {
            return Err(CombineError::SpatialMismatch {
                expected: (h, w),
                got: (m.height(), m.width()),
            });
        }
        data.extend_from_slice(m.data());
    }
    FeatureMap::from_vec(maps.len(), h, w, data).map_err(CombineError::Shape)
}

/// Fuses a response stack with the encoder head (inference mode). The pass
/// count must match the head's input width.
pub fn encode_aggregate(
    responses: &[FeatureMap],
    head: &EncoderHead,
) -> Result<FeatureMap, CombineError> {
    if responses.len() != head.n_inputs() {
        return Err(CombineError::CountMismatch {
            expected: head.n_inputs(),
            got: responses.len(),
        });
    }
    let stack = stack_responses(responses)?;
    head.forward_eval(&stack).map_err(CombineError::Shape)
}

//! Reverse-mode autodiff as a Wengert list over batches of feature maps.
//!
//! Each recorded operation snapshots whatever its backward pass needs
//! (layer weights, batchnorm statistics, masks). `backward` replays the list
//! once in reverse, accumulating parameter gradients keyed by the caller's
//! parameter ids. One terminal (loss) per tape, one backward per tape.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::conv::{xcorr, xcorr_grads, ConvLayer};
use crate::dropout::{DropoutError, DropoutMask};
use crate::norm::{BatchNorm, BnSaved};
use crate::tensor::{relu, FeatureMap, TensorError};

pub type BufId = usize;
pub type ParamId = usize;

/// A batch is an outer list of rank-3 maps; all tape ops are batched.
pub type Batch = Vec<FeatureMap>;

enum Op {
    Input,
    Conv {
        layer: ConvLayer,
        x: BufId,
        weight_id: Option<ParamId>,
        bias_id: Option<ParamId>,
    },
    BatchNorm {
        bn: BatchNorm,
        saved: BnSaved,
        x: BufId,
        gamma_id: Option<ParamId>,
        beta_id: Option<ParamId>,
    },
    Relu {
        x: BufId,
    },
    MulMask {
        mask: DropoutMask,
        x: BufId,
    },
    XCorr {
        target: BufId,
        search: BufId,
    },
    Stack {
        parts: Vec<BufId>,
    },
    Scale {
        x: BufId,
        k: f32,
    },
}

enum Terminal {
    /// Plain sum of every element of every sample; gradient is all ones.
    SumAll { x: BufId },
    /// Class-balanced logistic loss against {-1,+1} label maps, averaged
    /// over the batch.
    BalancedLoss { x: BufId, labels: Batch },
}

/// Per-parameter gradient accumulators. Parameters never touched by the
/// recorded graph stay empty and read back as zero-length slices.
#[derive(Clone, Debug)]
pub struct Grads {
    by_param: Vec<Vec<f32>>,
}

impl Grads {
    fn new(n_params: usize) -> Self {
        Grads {
            by_param: vec![Vec::new(); n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.by_param[id]
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, delta: &[f32]) {
        let slot = &mut self.by_param[id];
        if slot.is_empty() {
            slot.resize(delta.len(), 0.0);
        }
        for (a, d) in slot.iter_mut().zip(delta) {
            *a += d;
        }
    }
}

pub struct GradTape {
    ops: Vec<Op>,
    vals: Vec<Batch>,
    d_vals: Vec<Option<Batch>>,
    terminal: Option<Terminal>,
    n_params: usize,
    consumed: bool,
}

impl GradTape {
    pub fn new(n_params: usize) -> Self {
        GradTape {
            ops: Vec::new(),
            vals: Vec::new(),
            d_vals: Vec::new(),
            terminal: None,
            n_params,
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, val: Batch) -> BufId {
        self.ops.push(op);
        self.vals.push(val);
        self.ops.len() - 1
    }

    fn check_param(&self, id: Option<ParamId>) -> Result<(), TapeError> {
        if let Some(id) = id {
            if id >= self.n_params {
                return Err(TapeError::ParamOutOfRange {
                    id,
                    registered: self.n_params,
                });
            }
        }
        Ok(())
    }

    /// Saved forward value of a buffer.
    pub fn value(&self, b: BufId) -> &[FeatureMap] {
        &self.vals[b]
    }

    /// Gradient of the loss with respect to a buffer; available after
    /// `backward` for buffers on the loss path.
    pub fn grad_of(&self, b: BufId) -> Option<&[FeatureMap]> {
        self.d_vals.get(b).and_then(|d| d.as_deref())
    }

    pub fn input(&mut self, batch: Batch) -> BufId {
        self.push(Op::Input, batch)
    }

    pub fn conv(
        &mut self,
        layer: &ConvLayer,
        weight_id: Option<ParamId>,
        bias_id: Option<ParamId>,
        x: BufId,
    ) -> Result<BufId, TapeError> {
        self.check_param(weight_id)?;
        self.check_param(bias_id)?;
        let out: Batch = self.vals[x]
            .iter()
            .map(|m| layer.forward(m))
            .collect::<Result<_, _>>()?;
        Ok(self.push(
            Op::Conv {
                layer: layer.clone(),
                x,
                weight_id,
                bias_id,
            },
            out,
        ))
    }

    /// Train-mode batchnorm: updates `bn`'s running statistics in place and
    /// snapshots what backward needs.
    pub fn batchnorm(
        &mut self,
        bn: &mut BatchNorm,
        gamma_id: Option<ParamId>,
        beta_id: Option<ParamId>,
        x: BufId,
    ) -> Result<BufId, TapeError> {
        self.check_param(gamma_id)?;
        self.check_param(beta_id)?;
        let (out, saved) = bn.forward_train(&self.vals[x])?;
        Ok(self.push(
            Op::BatchNorm {
                bn: bn.clone(),
                saved,
                x,
                gamma_id,
                beta_id,
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: BufId) -> BufId {
        let out: Batch = self.vals[x].iter().map(relu).collect();
        self.push(Op::Relu { x }, out)
    }

    /// Applies one dropout mask to every sample in the batch.
    pub fn mask(&mut self, mask: &DropoutMask, x: BufId) -> Result<BufId, TapeError> {
        let out: Batch = self.vals[x]
            .iter()
            .map(|m| mask.apply(m))
            .collect::<Result<_, _>>()?;
        Ok(self.push(
            Op::MulMask {
                mask: mask.clone(),
                x,
            },
            out,
        ))
    }

    /// Pairs samples by batch index: response_i = xcorr(target_i, search_i).
    pub fn xcorr(&mut self, target: BufId, search: BufId) -> Result<BufId, TapeError> {
        if self.vals[target].len() != self.vals[search].len() {
            return Err(TapeError::BatchLenMismatch {
                a: self.vals[target].len(),
                b: self.vals[search].len(),
            });
        }
        let out: Batch = self.vals[target]
            .iter()
            .zip(&self.vals[search])
            .map(|(t, s)| xcorr(t, s))
            .collect::<Result<_, _>>()?;
        Ok(self.push(Op::XCorr { target, search }, out))
    }

    /// Stacks n single-channel buffers into one n-channel buffer per sample,
    /// in argument order (slot 0 first).
    pub fn stack(&mut self, parts: &[BufId]) -> Result<BufId, TapeError> {
        let first = parts.first().ok_or(TapeError::EmptyStack)?;
        let batch_len = self.vals[*first].len();
        let (c0, h, w) = self.vals[*first][0].shape();
        if c0 != 1 {
            return Err(TapeError::StackNotSingleChannel { channels: c0 });
        }
        for &p in parts {
            if self.vals[p].len() != batch_len {
                return Err(TapeError::BatchLenMismatch {
                    a: batch_len,
                    b: self.vals[p].len(),
                });
            }
            for m in &self.vals[p] {
                if m.shape() != (1, h, w) {
                    return Err(TapeError::Shape(TensorError::BatchShapeMismatch {
                        expected: (1, h, w),
                        got: m.shape(),
                    }));
                }
            }
        }
        let mut out = Vec::with_capacity(batch_len);
        for s in 0..batch_len {
            let mut stacked = FeatureMap::zeros(parts.len(), h, w);
            for (i, &p) in parts.iter().enumerate() {
                stacked.channel_mut(i).copy_from_slice(self.vals[p][s].channel(0));
            }
            out.push(stacked);
        }
        Ok(self.push(Op::Stack { parts: parts.to_vec() }, out))
    }

    pub fn scale(&mut self, x: BufId, k: f32) -> BufId {
        let out: Batch = self.vals[x].iter().map(|m| m.map(|v| v * k)).collect();
        self.push(Op::Scale { x, k }, out)
    }

    /// Terminal: sum of all elements across the batch.
    pub fn sum_all(&mut self, x: BufId) -> Result<f32, TapeError> {
        if self.terminal.is_some() {
            return Err(TapeError::TerminalAlreadySet);
        }
        let total: f64 = self.vals[x]
            .iter()
            .map(|m| m.data().iter().map(|&v| v as f64).sum::<f64>())
            .sum();
        self.terminal = Some(Terminal::SumAll { x });
        Ok(total as f32)
    }

    /// Terminal: per-sample mean-free balanced logistic loss
    /// sum_cells w(y) * ln(1 + exp(-y r)), with w chosen so positive and
    /// negative cells carry equal total mass, averaged over the batch.
    pub fn balanced_loss(&mut self, x: BufId, labels: &[FeatureMap]) -> Result<f32, TapeError> {
        if self.terminal.is_some() {
            return Err(TapeError::TerminalAlreadySet);
        }
        let batch = &self.vals[x];
        if batch.len() != labels.len() {
            return Err(TapeError::BatchLenMismatch {
                a: batch.len(),
                b: labels.len(),
            });
        }
        for (r, l) in batch.iter().zip(labels) {
            if r.shape() != l.shape() {
                return Err(TapeError::Shape(TensorError::BatchShapeMismatch {
                    expected: r.shape(),
                    got: l.shape(),
                }));
            }
            if l.data().iter().any(|&y| y != 1.0 && y != -1.0) {
                return Err(TapeError::LabelNotSigned);
            }
        }
        let mut total = 0.0f64;
        for (r, l) in batch.iter().zip(labels) {
            let (w_pos, w_neg) = class_weights(l);
            for (&v, &y) in r.data().iter().zip(l.data()) {
                let w = if y > 0.0 { w_pos } else { w_neg };
                total += w as f64 * softplus(-y * v) as f64;
            }
        }
        let value = (total / batch.len() as f64) as f32;
        self.terminal = Some(Terminal::BalancedLoss {
            x,
            labels: labels.to_vec(),
        });
        Ok(value)
    }

    /// Replays the list in reverse once, returning parameter gradients.
    pub fn backward(&mut self) -> Result<Grads, TapeError> {
        if self.consumed {
            return Err(TapeError::DoubleBackward);
        }
        let terminal = match &self.terminal {
            None => return Err(TapeError::BackwardBeforeForward),
            Some(t) => t,
        };
        self.consumed = true;
        self.d_vals = vec![None; self.vals.len()];
        // Seed the terminal's input gradient.
        match terminal {
            Terminal::SumAll { x } => {
                let seed: Batch = self.vals[*x]
                    .iter()
                    .map(|m| FeatureMap::from_vec(m.channels(), m.height(), m.width(), vec![1.0; m.len()]).unwrap())
                    .collect();
                self.d_vals[*x] = Some(seed);
            }
            Terminal::BalancedLoss { x, labels } => {
                let inv_b = 1.0 / self.vals[*x].len() as f32;
                let seed: Batch = self.vals[*x]
                    .iter()
                    .zip(labels)
                    .map(|(r, l)| {
                        let (w_pos, w_neg) = class_weights(l);
                        FeatureMap::from_fn(r.channels(), r.height(), r.width(), |c, y, xx| {
                            let v = r.at(c, y, xx);
                            let lbl = l.at(c, y, xx);
                            let w = if lbl > 0.0 { w_pos } else { w_neg };
                            inv_b * w * (-lbl) * sigmoid(-lbl * v)
                        })
                    })
                    .collect();
                self.d_vals[*x] = Some(seed);
            }
        }
        let mut grads = Grads::new(self.n_params);
        for i in (0..self.ops.len()).rev() {
            let d_out = match self.d_vals[i].take() {
                Some(d) => d,
                None => continue, // not on the loss path
            };
            match &self.ops[i] {
                Op::Input => {
                    // keep the gradient inspectable via grad_of
                    self.d_vals[i] = Some(d_out);
                    continue;
                }
                Op::Conv {
                    layer,
                    x,
                    weight_id,
                    bias_id,
                } => {
                    let mut d_in = Vec::with_capacity(d_out.len());
                    for (inp, g) in self.vals[*x].iter().zip(&d_out) {
                        let (dx, dw, db) = layer.grads(inp, g);
                        d_in.push(dx);
                        if let Some(id) = weight_id {
                            grads.accumulate(*id, &dw);
                        }
                        if let Some(id) = bias_id {
                            grads.accumulate(*id, &db);
                        }
                    }
                    accumulate_batch(&mut self.d_vals[*x], d_in);
                }
                Op::BatchNorm {
                    bn,
                    saved,
                    x,
                    gamma_id,
                    beta_id,
                } => {
                    let (d_in, d_gamma, d_beta) = bn.grads(&self.vals[*x], saved, &d_out);
                    if let Some(id) = gamma_id {
                        grads.accumulate(*id, &d_gamma);
                    }
                    if let Some(id) = beta_id {
                        grads.accumulate(*id, &d_beta);
                    }
                    accumulate_batch(&mut self.d_vals[*x], d_in);
                }
                Op::Relu { x } => {
                    let d_in: Batch = self.vals[*x]
                        .iter()
                        .zip(&d_out)
                        .map(|(inp, g)| {
                            FeatureMap::from_fn(inp.channels(), inp.height(), inp.width(), |c, y, xx| {
                                if inp.at(c, y, xx) > 0.0 {
                                    g.at(c, y, xx)
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect();
                    accumulate_batch(&mut self.d_vals[*x], d_in);
                }
                Op::MulMask { mask, x } => {
                    let d_in: Batch = d_out
                        .iter()
                        .map(|g| mask.apply(g))
                        .collect::<Result<_, _>>()
                        .expect("mask matched forward shape");
                    accumulate_batch(&mut self.d_vals[*x], d_in);
                }
                Op::XCorr { target, search } => {
                    let mut d_t = Vec::with_capacity(d_out.len());
                    let mut d_s = Vec::with_capacity(d_out.len());
                    for ((t, s), g) in self.vals[*target]
                        .iter()
                        .zip(&self.vals[*search])
                        .zip(&d_out)
                    {
                        let (dt, ds) = xcorr_grads(t, s, g);
                        d_t.push(dt);
                        d_s.push(ds);
                    }
                    accumulate_batch(&mut self.d_vals[*target], d_t);
                    accumulate_batch(&mut self.d_vals[*search], d_s);
                }
                Op::Stack { parts } => {
                    for (ci, &p) in parts.iter().enumerate() {
                        let d_part: Batch = d_out
                            .iter()
                            .map(|g| {
                                let mut m = FeatureMap::zeros(1, g.height(), g.width());
                                m.channel_mut(0).copy_from_slice(g.channel(ci));
                                m
                            })
                            .collect();
                        accumulate_batch(&mut self.d_vals[p], d_part);
                    }
                }
                Op::Scale { x, k } => {
                    let d_in: Batch = d_out.iter().map(|g| g.map(|v| v * k)).collect();
                    accumulate_batch(&mut self.d_vals[*x], d_in);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate_batch(slot: &mut Option<Batch>, delta: Batch) {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                for (a, b) in e.data_mut().iter_mut().zip(d.data()) {
                    *a += b;
                }
            }
        }
    }
}

fn class_weights(label: &FeatureMap) -> (f32, f32) {
    let n_pos = label.data().iter().filter(|&&y| y > 0.0).count().max(1);
    let n_neg = label.data().iter().filter(|&&y| y < 0.0).count().max(1);
    (0.5 / n_pos as f32, 0.5 / n_neg as f32)
}

/// ln(1 + e^a) without overflow.
pub fn softplus(a: f32) -> f32 {
    if a > 0.0 {
        a + libm::log1pf(libm::expf(-a))
    } else {
        libm::log1pf(libm::expf(a))
    }
}

/// 1 / (1 + e^-a) without overflow.
pub fn sigmoid(a: f32) -> f32 {
    if a >= 0.0 {
        1.0 / (1.0 + libm::expf(-a))
    } else {
        let e = libm::expf(a);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TapeError {
    BackwardBeforeForward,
    DoubleBackward,
    TerminalAlreadySet,
    ParamOutOfRange { id: usize, registered: usize },
    BatchLenMismatch { a: usize, b: usize },
    EmptyStack,
    StackNotSingleChannel { channels: usize },
    LabelNotSigned,
    Shape(TensorError),
    Mask(DropoutError),
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::BackwardBeforeForward => {
                write!(f, "backward called before a loss terminal was recorded")
            }
            TapeError::DoubleBackward => write!(f, "tape already consumed by backward"),
            TapeError::TerminalAlreadySet => write!(f, "tape already has a loss terminal"),
            TapeError::ParamOutOfRange { id, registered } => {
                write!(f, "parameter id {id} out of range ({registered} registered)")
            }
            TapeError::BatchLenMismatch { a, b } => {
                write!(f, "batch lengths differ: {a} vs {b}")
            }
            TapeError::EmptyStack => write!(f, "stack of zero buffers"),
            TapeError::StackNotSingleChannel { channels } => {
                write!(f, "stack inputs must be single-channel, got {channels}")
            }
            TapeError::LabelNotSigned => write!(f, "label map values must be +1 or -1"),
            TapeError::Shape(e) => write!(f, "{e}"),
            TapeError::Mask(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TapeError {}

impl From<TensorError> for TapeError {
    fn from(e: TensorError) -> Self {
        TapeError::Shape(e)
    }
}

impl From<DropoutError> for TapeError {
    fn from(e: DropoutError) -> Self {
        TapeError::Mask(e)
    }
}

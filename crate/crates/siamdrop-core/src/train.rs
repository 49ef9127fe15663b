//! Staged SGD training on synthetic exemplar/search pairs.
//!
//! Stage 1 pretrains the backbone alone on raw correlation responses (no
//! dropout). Stage 2 trains the encoder head on stacked masked responses
//! with the backbone frozen; only the head sits on the tape. Stage 3
//! fine-tunes both through the full masked graph.

use alloc::vec::Vec;

use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::combine::{stack_responses, CombineError, EncoderHead};
use crate::conv::xcorr;
use crate::dropout::{DropoutError, MaskKind, MaskSet};
use crate::optim::{OptimError, Sgd};
use crate::synth::TrainingPair;
use crate::tape::{GradTape, TapeError};
use crate::tensor::{FeatureMap, TensorError};
use crate::track::MaskSpec;

/// Constant factor on raw correlation responses in the headless pretrain
/// loss. Raw responses sum ~1600 products and would saturate the logistic
/// loss; the encoder stages need no factor because the head's batch norms
/// renormalize. Inference never applies it.
pub const RESPONSE_LOSS_SCALE: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    BackbonePretrain,
    HeadTrain,
    Joint,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone-pretrain" => Some(Stage::BackbonePretrain),
            "head-train" => Some(Stage::HeadTrain),
            "joint" => Some(Stage::Joint),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::BackbonePretrain => "backbone-pretrain",
            Stage::HeadTrain => "head-train",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub lr_decay: f32,
    pub lr_decay_every: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Mask set for the encoder stages; the pretrain stage ignores it.
    pub mask: MaskSpec,
    pub seed: u64,
}

impl TrainConfig {
    /// Stage defaults: 20/10/5 epochs, batch 8, lr 1e-2 halved every 5
    /// epochs, momentum 0.9, weight decay 5e-4.
    pub fn defaults(stage: Stage) -> Self {
        TrainConfig {
            stage,
            epochs: match stage {
                Stage::BackbonePretrain => 20,
                Stage::HeadTrain => 10,
                Stage::Joint => 5,
            },
            batch: 8,
            lr: 1e-2,
            lr_decay: 0.5,
            lr_decay_every: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            mask: MaskSpec::none(),
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    EmptyData,
    /// Encoder stages need a head.
    MissingHead,
    HeadWidthMismatch { expected: usize, got: usize },
    /// Loss left the finite range; training aborted.
    Diverged { epoch: usize, step: usize },
    Tape(TapeError),
    Optim(OptimError),
    Mask(DropoutError),
    Combine(CombineError),
    Shape(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyData => write!(f, "no training pairs"),
            TrainError::MissingHead => write!(f, "this stage trains an encoder head; none given"),
            TrainError::HeadWidthMismatch { expected, got } => {
                write!(f, "head fuses {expected} responses but mask spec yields {got}")
            }
            TrainError::Diverged { epoch, step } => {
                write!(f, "loss diverged at epoch {epoch} step {step}")
            }
            TrainError::Tape(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::Mask(e) => write!(f, "{e}"),
            TrainError::Combine(e) => write!(f, "{e}"),
            TrainError::Shape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}

impl From<DropoutError> for TrainError {
    fn from(e: DropoutError) -> Self {
        TrainError::Mask(e)
    }
}

impl From<CombineError> for TrainError {
    fn from(e: CombineError) -> Self {
        TrainError::Combine(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Shape(e)
    }
}

const BATCH_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Runs one training stage in place. The validation hook runs after every
/// epoch; return None to skip scoring that epoch. Deterministic in
/// (weights, pairs, config).
pub fn train_stage(
    backbone: &mut Backbone,
    mut head: Option<&mut EncoderHead>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut val_hook: impl FnMut(usize, &Backbone, Option<&EncoderHead>) -> Option<f64>,
) -> Result<Vec<LossRecord>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if cfg.stage != Stage::BackbonePretrain {
        let h = head.as_deref().ok_or(TrainError::MissingHead)?;
        if h.n_inputs() != cfg.mask.count() {
            return Err(TrainError::HeadWidthMismatch {
                expected: h.n_inputs(),
                got: cfg.mask.count(),
            });
        }
    }
    let n_params = match cfg.stage {
        Stage::BackbonePretrain => backbone.n_params(),
        Stage::HeadTrain => EncoderHead::n_params(),
        Stage::Joint => backbone.n_params() + EncoderHead::n_params(),
    };
    let mut sgd = Sgd::new(n_params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6E);
    let code_shape = {
        let side = backbone.code_side(pairs[0].exemplar.height())?;
        (backbone.out_channels(), side, side)
    };
    // deterministic kinds keep one fixed set; stochastic kinds redraw per batch
    let fixed_masks = if cfg.stage != Stage::BackbonePretrain
        && matches!(cfg.mask.kind, MaskKind::None | MaskKind::Slice)
    {
        Some(cfg.mask.build(code_shape, cfg.seed)?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % cfg.lr_decay_every == 0 {
            sgd.lr *= cfg.lr_decay;
        }
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in indices.chunks(cfg.batch.max(1)).enumerate() {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let masks = match &fixed_masks {
                Some(m) => m.clone(),
                None if cfg.stage == Stage::BackbonePretrain => MaskSet::identity_only(code_shape),
                None => {
                    let mix = (epoch as u64)
                        .wrapping_mul(0x1_0000)
                        .wrapping_add(step as u64)
                        .wrapping_mul(BATCH_SEED_MIX);
                    cfg.mask.build(code_shape, cfg.seed.wrapping_add(mix))?
                }
            };
            let loss = match cfg.stage {
                Stage::BackbonePretrain => pretrain_step(backbone, &batch, &mut sgd)?,
                Stage::HeadTrain => {
                    head_step(backbone, head.as_deref_mut().unwrap(), &masks, &batch, &mut sgd)?
                }
                Stage::Joint => joint_step(
                    backbone,
                    head.as_deref_mut().unwrap(),
                    &masks,
                    &batch,
                    &mut sgd,
                )?,
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            loss_sum += loss as f64;
            steps += 1;
        }
        let val_auc = val_hook(epoch, backbone, head.as_deref());
        records.push(LossRecord {
            epoch,
            mean_loss: loss_sum / steps as f64,
            val_auc,
        });
    }
    Ok(records)
}

fn batch_maps(batch: &[&TrainingPair]) -> (Vec<FeatureMap>, Vec<FeatureMap>, Vec<FeatureMap>) {
    let z = batch.iter().map(|p| p.exemplar.clone()).collect();
    let x = batch.iter().map(|p| p.search.clone()).collect();
    let labels = batch.iter().map(|p| p.label.clone()).collect();
    (z, x, labels)
}

/// Headless stage: raw correlation against the labels, response scaled by
/// the constant factor.
fn pretrain_step(
    backbone: &mut Backbone,
    batch: &[&TrainingPair],
    sgd: &mut Sgd,
) -> Result<f32, TrainError> {
    let (z, x, labels) = batch_maps(batch);
    let mut tape = GradTape::new(backbone.n_params());
    let zb = tape.input(z);
    let xb = tape.input(x);
    let zc = backbone.tape_embed(&mut tape, zb, Some(0))?;
    let xc = backbone.tape_embed(&mut tape, xb, Some(0))?;
    let r = tape.xcorr(zc, xc)?;
    let r = tape.scale(r, RESPONSE_LOSS_SCALE);
    let loss = tape.balanced_loss(r, &labels)?;
    let grads = tape.backward()?;
    sgd.step(&mut backbone.params_mut(), &grads)?;
    Ok(loss)
}

/// Frozen-backbone stage: masked responses are computed outside the tape
/// and the stacked maps enter it as plain inputs.
fn head_step(
    backbone: &Backbone,
    head: &mut EncoderHead,
    masks: &MaskSet,
    batch: &[&TrainingPair],
    sgd: &mut Sgd,
) -> Result<f32, TrainError> {
    let mut stacks = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for pair in batch {
        let zc = backbone.embed(&pair.exemplar)?;
        let xc = backbone.embed(&pair.search)?;
        let mut responses = Vec::with_capacity(masks.len());
        for m in masks.iter() {
            responses.push(xcorr(&m.apply(&zc)?, &xc)?);
        }
        stacks.push(stack_responses(&responses)?);
        labels.push(pair.label.clone());
    }
    let mut tape = GradTape::new(EncoderHead::n_params());
    let input = tape.input(stacks);
    let out = head.tape_forward(&mut tape, input, Some(0))?;
    let loss = tape.balanced_loss(out, &labels)?;
    let grads = tape.backward()?;
    sgd.step(&mut head.params_mut(), &grads)?;
    Ok(loss)
}

/// Full graph: backbone, mask applications, correlations, stack, head.
fn joint_step(
    backbone: &mut Backbone,
    head: &mut EncoderHead,
    masks: &MaskSet,
    batch: &[&TrainingPair],
    sgd: &mut Sgd,
) -> Result<f32, TrainError> {
    let (z, x, labels) = batch_maps(batch);
    let n_backbone = backbone.n_params();
    let mut tape = GradTape::new(n_backbone + EncoderHead::n_params());
    let zb = tape.input(z);
    let xb = tape.input(x);
    let zc = backbone.tape_embed(&mut tape, zb, Some(0))?;
    let xc = backbone.tape_embed(&mut tape, xb, Some(0))?;
    let mut responses = Vec::with_capacity(masks.len());
    for m in masks.iter() {
        let masked = tape.mask(m, zc)?;
        responses.push(tape.xcorr(masked, xc)?);
    }
    let stacked = tape.stack(&responses)?;
    let out = head.tape_forward(&mut tape, stacked, Some(n_backbone))?;
    let loss = tape.balanced_loss(out, &labels)?;
    let grads = tape.backward()?;
    let mut params = backbone.params_mut();
    params.extend(head.params_mut());
    sgd.step(&mut params, &grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::dropout::SLICE_FRACTIONS;
    use crate::synth::{render, training_pairs, MotionModel, PairConfig, SceneSpec};

    fn tiny_pairs(count: usize) -> Vec<TrainingPair> {
        let ds = render(&SceneSpec {
            width: 96,
            height: 96,
            frames: 8,
            radii: (12.0, 10.0),
            start_center: (48.0, 48.0),
            motion: MotionModel::Linear {
                velocity: (0.7, -0.4),
            },
            events: Vec::new(),
            clutter: 0.4,
            target_seed: 3,
            seed: 31,
        })
        .unwrap();
        training_pairs(&[ds], count, &PairConfig::default(), 11).unwrap()
    }

    fn backbone() -> Backbone {
        Backbone::new(&BackboneConfig::default()).unwrap()
    }

    fn snapshot(b: &mut Backbone) -> Vec<Vec<f32>> {
        b.params_mut().iter().map(|p| (**p).clone()).collect()
    }

    fn quick_cfg(stage: Stage, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::defaults(stage);
        cfg.epochs = epochs;
        cfg.batch = 2;
        cfg
    }

    #[test]
    fn zero_lr_keeps_weights_and_loss_flat() {
        let mut b = backbone();
        let before = snapshot(&mut b);
        let pairs = tiny_pairs(4);
        let mut cfg = quick_cfg(Stage::BackbonePretrain, 2);
        cfg.lr = 0.0;
        // one batch holds the whole set, so reshuffling cannot move the
        // batch-norm statistics between epochs
        cfg.batch = 4;
        let recs = train_stage(&mut b, None, &pairs, &cfg, |_, _, _| None).unwrap();
        assert_eq!(snapshot(&mut b), before);
        assert_eq!(recs.len(), 2);
        assert!((recs[0].mean_loss - recs[1].mean_loss).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_decreases() {
        let mut b = backbone();
        let pairs = tiny_pairs(6);
        let cfg = quick_cfg(Stage::BackbonePretrain, 5);
        let recs = train_stage(&mut b, None, &pairs, &cfg, |_, _, _| None).unwrap();
        assert!(
            recs.last().unwrap().mean_loss < recs[0].mean_loss,
            "loss went {} -> {}",
            recs[0].mean_loss,
            recs.last().unwrap().mean_loss
        );
        assert!(recs.iter().all(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = tiny_pairs(4);
        let cfg = quick_cfg(Stage::BackbonePretrain, 3);
        let run = || {
            let mut b = backbone();
            let recs = train_stage(&mut b, None, &pairs, &cfg, |_, _, _| None).unwrap();
            (recs, snapshot(&mut b))
        };
        let (ra, wa) = run();
        let (rb, wb) = run();
        assert_eq!(ra, rb);
        assert_eq!(wa, wb);
    }

    #[test]
    fn head_stage_freezes_backbone() {
        let mut b = backbone();
        let before = snapshot(&mut b);
        let mut head = EncoderHead::new(13, 5).unwrap();
        let head_before: Vec<Vec<f32>> = head.params_mut().iter().map(|p| (**p).clone()).collect();
        let pairs = tiny_pairs(4);
        let mut cfg = quick_cfg(Stage::HeadTrain, 2);
        cfg.mask = MaskSpec {
            kind: MaskKind::Slice,
            n: 13,
            rate: 0.0,
            fractions: SLICE_FRACTIONS.to_vec(),
        };
        train_stage(&mut b, Some(&mut head), &pairs, &cfg, |_, _, _| None).unwrap();
        assert_eq!(snapshot(&mut b), before, "backbone must stay frozen");
        let head_after: Vec<Vec<f32>> = head.params_mut().iter().map(|p| (**p).clone()).collect();
        assert_ne!(head_before, head_after, "head must move");
    }

    #[test]
    fn joint_stage_moves_both() {
        let mut b = backbone();
        let before = snapshot(&mut b);
        let mut head = EncoderHead::new(4, 5).unwrap();
        let pairs = tiny_pairs(4);
        let mut cfg = quick_cfg(Stage::Joint, 1);
        cfg.mask = MaskSpec {
            kind: MaskKind::Channel,
            n: 4,
            rate: 0.2,
            fractions: Vec::new(),
        };
        train_stage(&mut b, Some(&mut head), &pairs, &cfg, |_, _, _| None).unwrap();
        assert_ne!(snapshot(&mut b), before);
    }

    #[test]
    fn encoder_stage_without_head_is_rejected() {
        let mut b = backbone();
        let pairs = tiny_pairs(2);
        let cfg = quick_cfg(Stage::HeadTrain, 1);
        assert_eq!(
            train_stage(&mut b, None, &pairs, &cfg, |_, _, _| None).unwrap_err(),
            TrainError::MissingHead
        );
        let mut head = EncoderHead::new(13, 5).unwrap();
        // mask spec expands to 1, head wants 13
        assert_eq!(
            train_stage(&mut b, Some(&mut head), &pairs, &cfg, |_, _, _| None).unwrap_err(),
            TrainError::HeadWidthMismatch {
                expected: 13,
                got: 1
            }
        );
    }

    #[test]
    fn runaway_lr_aborts_with_divergence() {
        let mut b = backbone();
        let pairs = tiny_pairs(2);
        let mut cfg = quick_cfg(Stage::BackbonePretrain, 10);
        cfg.lr = 1e9;
        let err = train_stage(&mut b, None, &pairs, &cfg, |_, _, _| None).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "got {err:?}");
    }

    #[test]
    fn val_hook_lands_in_records() {
        let mut b = backbone();
        let pairs = tiny_pairs(2);
        let cfg = quick_cfg(Stage::BackbonePretrain, 3);
        let recs = train_stage(&mut b, None, &pairs, &cfg, |epoch, _, _| {
            if epoch == 2 {
                Some(0.5)
            } else {
                None
            }
        })
        .unwrap();
        assert_eq!(recs[0].val_auc, None);
        assert_eq!(recs[2].val_auc, Some(0.5));
    }
}

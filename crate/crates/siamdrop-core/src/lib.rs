//! Siamese template tracking made robust to occlusion by applying
//! *structured dropouts* to the target's latent code.
//!
//! The crate is a self-contained desk-scale tracking stack:
//!
//! * [`tensor`] / [`conv`] / [`norm`] — a minimal rank-3 array engine with
//!   valid-mode 2-D convolution, cross-correlation and batch normalization;
//! * [`tape`] / [`optim`] — reverse-mode gradients over those operations and
//!   SGD with momentum, enough to train everything here from scratch;
//! * [`backbone`] — the shared-weight embedding network applied to exemplar
//!   and search patches;
//! * [`dropout`] — channel / segment / slice structured masks plus the
//!   unstructured per-element baseline, applied to the exemplar code;
//! * [`combine`] — turning the per-mask response maps into one prediction,
//!   either by explicit sampling rules or by a small learned encoder head;
//! * [`track`] — the per-sequence tracking loop (init on frame 1, then
//!   crop / embed / mask / correlate / combine per frame);
//! * [`synth`] — a deterministic synthetic-sequence renderer with exact
//!   ground truth and exact per-frame occlusion fractions;
//! * [`train`] — staged training on synthetic pairs;
//! * [`metrics`] — OPE evaluation (precision, success/AUC, AO, SR) and the
//!   occlusion-gain analysis.
//!
//! The crate is `no_std` (with `alloc`); everything is pure computation over
//! in-memory buffers. File formats, the CLI and parallel drivers live in the
//! companion `siamdrop-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod bbox;
pub mod combine;
pub mod conv;
pub mod dropout;
pub mod metrics;
pub mod norm;
pub mod optim;
pub mod patch;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod track;
pub mod train;

pub use backbone::{Backbone, BackboneConfig};
pub use bbox::BBox;
pub use combine::{EncoderHead, PassOutput, Prediction};
pub use dropout::{DropoutMask, MaskKind, MaskSet};
pub use tensor::FeatureMap;
pub use track::{Tracker, TrackerConfig};

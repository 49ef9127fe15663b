//! Structured dropout over the target latent code: whole-channel, spatial
//! rectangle (segment) and deterministic edge-strip (slice) masks, plus the
//! unstructured per-element baseline. Masks are applied by raw zeroing; no
//! activation rescaling happens here (the explicit combiner rescales scores
//! instead).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Channel,
    Segment,
    Slice,
    Mc,
}

impl MaskKind {
    pub fn parse(s: &str) -> Option<MaskKind> {
        match s {
            "none" => Some(MaskKind::None),
            "channel" => Some(MaskKind::Channel),
            "segment" => Some(MaskKind::Segment),
            "slice" => Some(MaskKind::Slice),
            "mc" => Some(MaskKind::Mc),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::None => "none",
            MaskKind::Channel => "channel",
            MaskKind::Segment => "segment",
            MaskKind::Slice => "slice",
            MaskKind::Mc => "mc",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which elements of the code survive. Patterns mirror the mask kinds so the
/// structural invariants are true by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeepPattern {
    All,
    /// Per-channel keep bits; a dropped channel is zeroed whole.
    Channels(Vec<bool>),
    /// One zeroed spatial rectangle `[y0,y1) x [x0,x1)`, identical across
    /// channels. Everything outside it is kept.
    DropRect {
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    },
    /// Per-element keep bits in (c, y, x) row-major order.
    Elements(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub kind: MaskKind,
    pub keep: KeepPattern,
    shape: (usize, usize, usize),
    kept_count: usize,
}

impl DropoutMask {
    /// Counts the kept elements for the given pattern; patterns must fit the
    /// shape (bit vectors sized to it, rectangles inside it).
    pub fn new(kind: MaskKind, keep: KeepPattern, shape: (usize, usize, usize)) -> Self {
        let (c, h, w) = shape;
        let kept_count = match &keep {
            KeepPattern::All => c * h * w,
            KeepPattern::Channels(bits) => bits.iter().filter(|&&b| b).count() * h * w,
            KeepPattern::DropRect { y0, y1, x0, x1 } => c * (h * w - (y1 - y0) * (x1 - x0)),
            KeepPattern::Elements(bits) => bits.iter().filter(|&&b| b).count(),
        };
        DropoutMask {
            kind,
            keep,
            shape,
            kept_count,
        }
    }

    pub fn identity(shape: (usize, usize, usize)) -> Self {
        DropoutMask::new(MaskKind::None, KeepPattern::All, shape)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn total_count(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    /// Exact by counting: kept elements / total elements.
    pub fn kept_fraction(&self) -> f64 {
        self.kept_count as f64 / self.total_count() as f64
    }

    /// The A of the explicit score rescale: 1 - kept_fraction.
    pub fn dropped_fraction(&self) -> f64 {
        1.0 - self.kept_fraction()
    }

    pub fn keep_bit(&self, c: usize, y: usize, x: usize) -> bool {
        match &self.keep {
            KeepPattern::All => true,
            KeepPattern::Channels(bits) => bits[c],
            KeepPattern::DropRect { y0, y1, x0, x1 } => {
                !(y >= *y0 && y < *y1 && x >= *x0 && x < *x1)
            }
            KeepPattern::Elements(bits) => bits[(c * self.shape.1 + y) * self.shape.2 + x],
        }
    }

    /// Zeroes dropped elements; kept values pass through unscaled.
    pub fn apply(&self, code: &FeatureMap) -> Result<FeatureMap, DropoutError> {
        if code.shape() != self.shape {
            return Err(DropoutError::ShapeMismatch {
                expected: self.shape,
                got: code.shape(),
            });
        }
        let mut out = code.clone();
        match &self.keep {
            KeepPattern::All => {}
            KeepPattern::Channels(bits) => {
                for (c, &keep) in bits.iter().enumerate() {
                    if !keep {
                        for v in out.channel_mut(c) {
                            *v = 0.0;
                        }
                    }
                }
            }
            KeepPattern::DropRect { y0, y1, x0, x1 } => {
                for c in 0..self.shape.0 {
                    for y in *y0..*y1 {
                        for x in *x0..*x1 {
                            *out.at_mut(c, y, x) = 0.0;
                        }
                    }
                }
            }
            KeepPattern::Elements(bits) => {
                for (v, &keep) in out.data_mut().iter_mut().zip(bits) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// An ordered ensemble of masks sharing one code shape. Slot 0 is always the
/// no-dropout mask; downstream consumers (the encoder head in particular)
/// rely on that slot assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<DropoutMask>,
    pub rng_seed: u64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.masks[0].shape()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, DropoutMask> {
        self.masks.iter()
    }

    /// The size-1 ensemble: just the no-dropout mask (baseline tracking).
    pub fn identity_only(shape: (usize, usize, usize)) -> MaskSet {
        MaskSet {
            masks: vec![DropoutMask::identity(shape)],
            rng_seed: 0,
        }
    }

    /// n-1 masks each zeroing floor(rate*C) whole channels chosen uniformly
    /// without replacement, plus the identity mask at slot 0.
    pub fn channel(
        n: usize,
        rate: f32,
        shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<MaskSet, DropoutError> {
        check_rate(rate)?;
        check_n(n)?;
        let (c, _, _) = shape;
        let drop_count = libm::floorf(rate * c as f32) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = Vec::with_capacity(n);
        masks.push(DropoutMask::identity(shape));
        for _ in 1..n {
            let mut bits = vec![true; c];
            for idx in rand::seq::index::sample(&mut rng, c, drop_count) {
                bits[idx] = false;
            }
            masks.push(DropoutMask::new(
                MaskKind::Channel,
                KeepPattern::Channels(bits),
                shape,
            ));
        }
        Ok(MaskSet {
            masks,
            rng_seed: seed,
        })
    }

    /// n-1 masks each zeroing one spatial rectangle (identical across
    /// channels) of area near rate*H*W, plus the identity mask. Rectangle
    /// sides come from a log-uniform aspect ratio in [1/3, 3]; position is
    /// uniform within the grid.
    pub fn segment(
        n: usize,
        rate: f32,
        shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<MaskSet, DropoutError> {
        check_rate(rate)?;
        check_n(n)?;
        let (_, h, w) = shape;
        let target_area = rate as f64 * (h * w) as f64;
        if target_area < 1.0 {
            return Err(DropoutError::RectTooSmall { target_area });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = Vec::with_capacity(n);
        masks.push(DropoutMask::identity(shape));
        let ln3 = libm::log(3.0);
        for _ in 1..n {
            let u = rng.random::<f64>() * 2.0 - 1.0;
            let aspect = libm::exp(u * ln3); // height/width
            let mut rh = (libm::round(libm::sqrt(target_area * aspect)) as usize).clamp(1, h);
            let mut rw = (libm::round(target_area / rh as f64) as usize).clamp(1, w);
            // never drop the whole grid: the combiner divides by kept area
            if rh * rw == h * w {
                if rw > 1 {
                    rw -= 1;
                } else {
                    rh -= 1;
                }
            }
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            masks.push(DropoutMask::new(
                MaskKind::Segment,
                KeepPattern::DropRect {
                    y0,
                    y1: y0 + rh,
                    x0,
                    x1: x0 + rw,
                },
                shape,
            ));
        }
        Ok(MaskSet {
            masks,
            rng_seed: seed,
        })
    }

    /// Deterministic schedule: for each fraction, one edge strip per side
    /// (left, right, top, bottom) of width/height round(f * W or H), plus the
    /// identity mask. No randomness, so no seed.
    pub fn slice(
        shape: (usize, usize, usize),
        fractions: &[f32],
    ) -> Result<MaskSet, DropoutError> {
        if fractions.is_empty() {
            return Err(DropoutError::EmptyFractions);
        }
        let (_, h, w) = shape;
        let mut masks = Vec::with_capacity(4 * fractions.len() + 1);
        masks.push(DropoutMask::identity(shape));
        for &f in fractions {
            if !(0.0..1.0).contains(&f) || f == 0.0 {
                return Err(DropoutError::FractionOutOfRange { fraction: f });
            }
            let sw = libm::roundf(f * w as f32) as usize;
            let sh = libm::roundf(f * h as f32) as usize;
            if sw == 0 || sw >= w || sh == 0 || sh >= h {
                return Err(DropoutError::DegenerateStrip {
                    fraction: f,
                    dims: (h, w),
                });
            }
            let rects = [
                (0, h, 0, sw),         // left strip
                (0, h, w - sw, w),     // right strip
                (0, sh, 0, w),         // top strip
                (h - sh, h, 0, w),     // bottom strip
            ];
            for (y0, y1, x0, x1) in rects {
                masks.push(DropoutMask::new(
                    MaskKind::Slice,
                    KeepPattern::DropRect { y0, y1, x0, x1 },
                    shape,
                ));
            }
        }
        Ok(MaskSet {
            masks,
            rng_seed: 0,
        })
    }

    /// n-1 masks with i.i.d. per-element keep probability 1-rate, plus the
    /// identity mask. If a draw drops every element (possible only for tiny
    /// maps at extreme rates), it is redrawn; after 64 futile attempts one
    /// element is force-kept so kept_fraction stays positive.
    pub fn mc(
        n: usize,
        rate: f32,
        shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<MaskSet, DropoutError> {
        check_rate(rate)?;
        if n < 1 {
            return Err(DropoutError::TooFewPasses { n });
        }
        let (c, h, w) = shape;
        let total = c * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = Vec::with_capacity(n);
        masks.push(DropoutMask::identity(shape));
        for _ in 1..n {
            let mut bits = vec![false; total];
            let mut attempts = 0;
            loop {
                let mut any = false;
                for b in &mut bits {
                    *b = rng.random::<f64>() >= rate as f64;
                    any |= *b;
                }
                if any || attempts >= 64 {
                    if !any {
                        bits[rng.random_range(0..total)] = true;
                    }
                    break;
                }
                attempts += 1;
            }
            masks.push(DropoutMask::new(
                MaskKind::Mc,
                KeepPattern::Elements(bits),
                shape,
            ));
        }
        Ok(MaskSet {
            masks,
            rng_seed: seed,
        })
    }

    /// Config-driven dispatch. `n` and `rate` are ignored for slice (the
    /// schedule is fixed by `fractions`) and everything is ignored for none.
    pub fn generate(
        kind: MaskKind,
        n: usize,
        rate: f32,
        fractions: &[f32],
        shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<MaskSet, DropoutError> {
        match kind {
            MaskKind::None => Ok(MaskSet::identity_only(shape)),
            MaskKind::Channel => MaskSet::channel(n, rate, shape, seed),
            MaskKind::Segment => MaskSet::segment(n, rate, shape, seed),
            MaskKind::Slice => MaskSet::slice(shape, fractions),
            MaskKind::Mc => MaskSet::mc(n, rate, shape, seed),
        }
    }
}

fn check_rate(rate: f32) -> Result<(), DropoutError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DropoutError::RateOutOfRange { rate });
    }
    Ok(())
}

fn check_n(n: usize) -> Result<(), DropoutError> {
    if n < 2 {
        return Err(DropoutError::TooFewPasses { n });
    }
    Ok(())
}

/// The fractions behind the 13-mask slice schedule (4 sides x 3 + identity).
pub const SLICE_FRACTIONS: [f32; 3] = [0.25, 1.0 / 3.0, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub enum DropoutError {
    RateOutOfRange { rate: f32 },
    TooFewPasses { n: usize },
    /// rate * H * W below one cell; no rectangle can realise it.
    RectTooSmall { target_area: f64 },
    EmptyFractions,
    FractionOutOfRange { fraction: f32 },
    /// Fraction rounds to an empty or full strip on this grid.
    DegenerateStrip { fraction: f32, dims: (usize, usize) },
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

impl fmt::Display for DropoutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropoutError::RateOutOfRange { rate } => {
                write!(f, "dropout rate {rate} outside [0, 1)")
            }
            DropoutError::TooFewPasses { n } => write!(f, "mask count {n} too small"),
            DropoutError::RectTooSmall { target_area } => {
                write!(f, "target rectangle area {target_area} below one cell")
            }
            DropoutError::EmptyFractions => write!(f, "slice schedule needs fractions"),
            DropoutError::FractionOutOfRange { fraction } => {
                write!(f, "slice fraction {fraction} outside (0, 1)")
            }
            DropoutError::DegenerateStrip { fraction, dims } => write!(
                f,
                "slice fraction {fraction} rounds to an empty or full strip on {}x{}",
                dims.0, dims.1
            ),
            DropoutError::ShapeMismatch { expected, got } => {
                write!(f, "mask shape {expected:?} vs code shape {got:?}")
            }
        }
    }
}

impl core::error::Error for DropoutError {}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: (usize, usize, usize) = (64, 6, 6);

    #[test]
    fn channel_masks_drop_fixed_count() {
        let set = MaskSet::channel(21, 0.2, SHAPE, 5).unwrap();
        assert_eq!(set.len(), 21);
        assert_eq!(set.masks[0].kind, MaskKind::None);
        for m in &set.masks[1..] {
            assert_eq!(m.kind, MaskKind::Channel);
            let dropped = match &m.keep {
                KeepPattern::Channels(bits) => bits.iter().filter(|&&b| !b).count(),
                other => panic!("unexpected pattern {other:?}"),
            };
            assert_eq!(dropped, 12); // floor(0.2 * 64)
            assert_eq!(m.kept_fraction(), 52.0 / 64.0);
        }
    }

    #[test]
    fn channel_rate_zero_keeps_everything() {
        let set = MaskSet::channel(5, 0.0, SHAPE, 1).unwrap();
        for m in set.iter() {
            assert_eq!(m.kept_fraction(), 1.0);
        }
    }

    #[test]
    fn masks_deterministic_per_seed() {
        for build in [MaskSet::channel, MaskSet::segment, MaskSet::mc] {
            let a = build(9, 0.25, SHAPE, 77).unwrap();
            let b = build(9, 0.25, SHAPE, 77).unwrap();
            let c = build(9, 0.25, SHAPE, 78).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn segment_areas_on_6x6_quarter_rate() {
        // Admissible integer rectangles for target area 9 under the declared
        // sampler land on areas 8, 9 or 10 only.
        for seed in 0..200 {
            let set = MaskSet::segment(9, 0.25, SHAPE, seed).unwrap();
            for m in &set.masks[1..] {
                let area = match m.keep {
                    KeepPattern::DropRect { y0, y1, x0, x1 } => (y1 - y0) * (x1 - x0),
                    _ => panic!("segment mask must store a rectangle"),
                };
                assert!((8..=10).contains(&area), "area {area}");
            }
        }
    }

    #[test]
    fn segment_rejects_sub_cell_area() {
        let err = MaskSet::segment(5, 0.02, (4, 6, 6), 0).unwrap_err();
        assert!(matches!(err, DropoutError::RectTooSmall { .. }));
    }

    #[test]
    fn slice_schedule_is_thirteen() {
        let set = MaskSet::slice(SHAPE, &SLICE_FRACTIONS).unwrap();
        assert_eq!(set.len(), 13);
        assert_eq!(set.masks[0].kind, MaskKind::None);
        // f=1/2 on a 6-wide map: left strip zeroes columns 0..3
        let half_left = &set.masks[9]; // fractions[2]=0.5, side order l,r,t,b
        assert_eq!(
            half_left.keep,
            KeepPattern::DropRect { y0: 0, y1: 6, x0: 0, x1: 3 }
        );
        assert_eq!(half_left.kept_fraction(), 0.5);
        // deterministic: no seed involved
        assert_eq!(set, MaskSet::slice(SHAPE, &SLICE_FRACTIONS).unwrap());
    }

    #[test]
    fn slice_rejects_degenerate_strips() {
        // 0.05 of width 6 rounds to zero columns
        assert!(matches!(
            MaskSet::slice(SHAPE, &[0.05]),
            Err(DropoutError::DegenerateStrip { .. })
        ));
        assert!(matches!(
            MaskSet::slice(SHAPE, &[]),
            Err(DropoutError::EmptyFractions)
        ));
    }

    #[test]
    fn mc_empirical_rate() {
        let set = MaskSet::mc(21, 0.2, SHAPE, 3).unwrap();
        let mut dropped = 0usize;
        let mut total = 0usize;
        for m in &set.masks[1..] {
            dropped += m.total_count() - m.kept_count();
            total += m.total_count();
        }
        let frac = dropped as f64 / total as f64;
        assert!((frac - 0.2).abs() < 0.02, "empirical drop fraction {frac}");
    }

    #[test]
    fn apply_is_identity_for_none_and_idempotent() {
        let code = FeatureMap::from_fn(4, 5, 5, |c, y, x| (c * 25 + y * 5 + x) as f32 - 40.0);
        let id = DropoutMask::identity((4, 5, 5));
        assert_eq!(id.apply(&code).unwrap(), code);
        let set = MaskSet::segment(4, 0.3, (4, 5, 5), 11).unwrap();
        for m in set.iter() {
            let once = m.apply(&code).unwrap();
            let twice = m.apply(&once).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn apply_rejects_shape_mismatch() {
        let m = DropoutMask::identity((2, 3, 3));
        let code = FeatureMap::zeros(2, 4, 3);
        assert!(matches!(
            m.apply(&code),
            Err(DropoutError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn kept_fraction_matches_bit_count() {
        for seed in 0..20 {
            for set in [
                MaskSet::channel(7, 0.3, SHAPE, seed).unwrap(),
                MaskSet::segment(7, 0.3, SHAPE, seed).unwrap(),
                MaskSet::mc(7, 0.3, SHAPE, seed).unwrap(),
                MaskSet::slice(SHAPE, &SLICE_FRACTIONS).unwrap(),
            ] {
                for m in set.iter() {
                    let mut kept = 0usize;
                    for c in 0..SHAPE.0 {
                        for y in 0..SHAPE.1 {
                            for x in 0..SHAPE.2 {
                                kept += m.keep_bit(c, y, x) as usize;
                            }
                        }
                    }
                    assert_eq!(kept, m.kept_count());
                    assert_eq!(m.kept_fraction(), kept as f64 / m.total_count() as f64);
                }
            }
        }
    }
}

//! Procedural tracking sequences with analytic ground truth and exact
//! per-frame occlusion fractions.
//!
//! A sequence is an elliptical, value-noise-textured target moving over a
//! textured background. Occlusion events either draw an opaque rectangle on
//! top of the target (patch occlusion) or retexture part of the target in
//! place (feature occlusion). Both kinds place their strip edge by a
//! quantile walk over the target's rasterized column or row sums, so the
//! fraction of target pixels covered tracks the requested coverage up to
//! one-column quantization, and the reported fraction is the exact pixel
//! ratio either way.

use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::patch::{crop_resize, Frame};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionModel {
    Linear { velocity: (f32, f32) },
    /// Per-frame step uniform in [-step, step] on each axis.
    RandomWalk { step: f32 },
}

impl MotionModel {
    /// Largest possible per-frame center displacement along one axis.
    pub fn speed_bound(&self) -> f32 {
        match *self {
            MotionModel::Linear { velocity } => {
                let (vx, vy) = velocity;
                let ax = if vx < 0.0 { -vx } else { vx };
                let ay = if vy < 0.0 { -vy } else { vy };
                if ax > ay {
                    ax
                } else {
                    ay
                }
            }
            MotionModel::RandomWalk { step } => step,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccKind {
    /// Opaque foreign object drawn over the target.
    Patch,
    /// In-place retexture of part of the target.
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccEvent {
    pub kind: OccKind,
    pub side: Side,
    /// First affected frame index.
    pub onset: usize,
    pub duration: usize,
    /// Fraction of target pixels covered on the plateau, in [0,1].
    pub peak_coverage: f32,
    pub texture_seed: u64,
}

impl OccEvent {
    /// Requested coverage at frame t: a trapezoid ramping up over the first
    /// quarter of the duration, holding at the peak for half, ramping down
    /// over the last quarter. Zero outside [onset, onset+duration).
    pub fn coverage_at(&self, t: usize) -> f32 {
        if t < self.onset || t >= self.onset + self.duration {
            return 0.0;
        }
        let u = (t - self.onset) as f32 + 0.5;
        let u = u / self.duration as f32;
        let ramp = 4.0 * if u < 1.0 - u { u } else { 1.0 - u };
        self.peak_coverage * ramp.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Ellipse semi-axes in pixels.
    pub radii: (f32, f32),
    pub start_center: (f32, f32),
    pub motion: MotionModel,
    pub events: Vec<OccEvent>,
    /// Background texture contrast in [0,1].
    pub clutter: f32,
    pub target_seed: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SequenceDataset {
    pub frames: Vec<Frame>,
    pub gt: Vec<BBox>,
    /// Exact occluded-target-pixel ratio per frame.
    pub occ_fraction: Vec<f64>,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SynthError {
    TargetDoesNotFit,
    StartOutOfFrame,
    NoFrames,
    EventOutOfBounds { index: usize },
    CoverageOutOfRange { index: usize },
    /// Declared coverages of simultaneously active events sum past 1.
    EventsExceedFullCoverage { frame: usize },
    EmptyDatasets,
    SequenceTooShort,
    ZeroCount,
    /// A rendered benchmark sequence misses its profile's occlusion bound.
    ProfileUnmet { sequence: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::TargetDoesNotFit => write!(f, "target ellipse does not fit the frame"),
            SynthError::StartOutOfFrame => write!(f, "start center leaves the frame margin"),
            SynthError::NoFrames => write!(f, "sequence length must be at least 1"),
            SynthError::EventOutOfBounds { index } => {
                write!(f, "event {index} extends past the sequence end")
            }
            SynthError::CoverageOutOfRange { index } => {
                write!(f, "event {index} peak coverage outside [0,1]")
            }
            SynthError::EventsExceedFullCoverage { frame } => {
                write!(f, "events at frame {frame} request more than full coverage")
            }
            SynthError::EmptyDatasets => write!(f, "no datasets supplied"),
            SynthError::SequenceTooShort => write!(f, "sequences need at least 2 frames"),
            SynthError::ZeroCount => write!(f, "benchmark count must be at least 1"),
            SynthError::ProfileUnmet { sequence } => {
                write!(f, "sequence {sequence} violates its benchmark profile bound")
            }
        }
    }
}

impl core::error::Error for SynthError {}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> u64 {
    splitmix(seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).rotate_left(32))
}

/// Bilinear value noise; one lattice hash yields all three channels.
fn noise_rgb(x: f32, y: f32, seed: u64, cell: f32) -> [f32; 3] {
    let gx = x / cell;
    let gy = y / cell;
    let ix = libm::floorf(gx) as i64;
    let iy = libm::floorf(gy) as i64;
    let fx = gx - ix as f32;
    let fy = gy - iy as f32;
    let corner = |dx: i64, dy: i64| -> [f32; 3] {
        let h = lattice(ix + dx, iy + dy, seed);
        [
            (h & 0xFF) as f32 / 255.0,
            ((h >> 8) & 0xFF) as f32 / 255.0,
            ((h >> 16) & 0xFF) as f32 / 255.0,
        ]
    };
    let (c00, c10, c01, c11) = (corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1));
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = c00[c] + (c10[c] - c00[c]) * fx;
        let bot = c01[c] + (c11[c] - c01[c]) * fx;
        out[c] = top + (bot - top) * fy;
    }
    out
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

fn texture_pixel(x: f32, y: f32, seed: u64, cell: f32, base: f32, amp: f32) -> [u8; 3] {
    let n = noise_rgb(x, y, seed, cell);
    [
        to_u8(base + amp * (n[0] - 0.5)),
        to_u8(base + amp * (n[1] - 0.5)),
        to_u8(base + amp * (n[2] - 0.5)),
    ]
}

/// Per-frame target centers under the spec's motion model, reflecting off
/// the margin that keeps the whole ellipse in frame.
pub fn target_centers(spec: &SceneSpec) -> Result<Vec<(f32, f32)>, SynthError> {
    let (rx, ry) = spec.radii;
    let (lo_x, hi_x) = (rx, spec.width as f32 - rx);
    let (lo_y, hi_y) = (ry, spec.height as f32 - ry);
    if lo_x >= hi_x || lo_y >= hi_y || rx < 2.0 || ry < 2.0 {
        return Err(SynthError::TargetDoesNotFit);
    }
    let (mut cx, mut cy) = spec.start_center;
    if cx < lo_x || cx > hi_x || cy < lo_y || cy > hi_y {
        return Err(SynthError::StartOutOfFrame);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6D6F_7469_6F6E);
    let (mut vx, mut vy) = match spec.motion {
        MotionModel::Linear { velocity } => velocity,
        MotionModel::RandomWalk { .. } => (0.0, 0.0),
    };
    let mut centers = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        centers.push((cx, cy));
        if let MotionModel::RandomWalk { step } = spec.motion {
            vx = rng.random_range(-step..=step);
            vy = rng.random_range(-step..=step);
        }
        cx += vx;
        cy += vy;
        if cx < lo_x {
            cx = 2.0 * lo_x - cx;
            vx = -vx;
        } else if cx > hi_x {
            cx = 2.0 * hi_x - cx;
            vx = -vx;
        }
        if cy < lo_y {
            cy = 2.0 * lo_y - cy;
            vy = -vy;
        } else if cy > hi_y {
            cy = 2.0 * hi_y - cy;
            vy = -vy;
        }
    }
    Ok(centers)
}

fn validate(spec: &SceneSpec) -> Result<(), SynthError> {
    if spec.frames == 0 {
        return Err(SynthError::NoFrames);
    }
    for (i, ev) in spec.events.iter().enumerate() {
        if ev.duration == 0 || ev.onset + ev.duration > spec.frames {
            return Err(SynthError::EventOutOfBounds { index: i });
        }
        if !(0.0..=1.0).contains(&ev.peak_coverage) {
            return Err(SynthError::CoverageOutOfRange { index: i });
        }
    }
    for t in 0..spec.frames {
        let total: f32 = spec.events.iter().map(|e| e.coverage_at(t)).sum();
        if total > 1.0 + 1e-6 {
            return Err(SynthError::EventsExceedFullCoverage { frame: t });
        }
    }
    Ok(())
}

/// Pixel-center test against the ellipse.
fn inside(px: usize, py: usize, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let dx = (px as f32 + 0.5 - cx) / rx;
    let dy = (py as f32 + 0.5 - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

struct TargetRaster {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    mask: Vec<bool>,
    col_sums: Vec<u32>,
    row_sums: Vec<u32>,
    area: u32,
}

fn rasterize_target(spec: &SceneSpec, cx: f32, cy: f32) -> TargetRaster {
    let (rx, ry) = spec.radii;
    let x0 = libm::floorf(cx - rx).max(0.0) as usize;
    let y0 = libm::floorf(cy - ry).max(0.0) as usize;
    let x1 = (libm::ceilf(cx + rx) as usize).min(spec.width);
    let y1 = (libm::ceilf(cy + ry) as usize).min(spec.height);
    let (w, h) = (x1 - x0, y1 - y0);
    let mut mask = vec![false; w * h];
    let mut col_sums = vec![0u32; w];
    let mut row_sums = vec![0u32; h];
    let mut area = 0;
    for y in 0..h {
        for x in 0..w {
            if inside(x0 + x, y0 + y, cx, cy, rx, ry) {
                mask[y * w + x] = true;
                col_sums[x] += 1;
                row_sums[y] += 1;
                area += 1;
            }
        }
    }
    TargetRaster {
        x0,
        y0,
        w,
        h,
        mask,
        col_sums,
        row_sums,
        area,
    }
}

/// Walks sums from the event's side until the cumulative count is nearest
/// to the wanted pixel count. Returns the number of columns (or rows) taken
/// from that side; 0 means no strip.
fn quantile_extent(sums: &[u32], from_end: bool, want: u32) -> usize {
    if want == 0 {
        return 0;
    }
    let mut cum = 0u32;
    let mut best = (0usize, want); // (extent, |cum - want|)
    let n = sums.len();
    for i in 0..n {
        let s = if from_end { sums[n - 1 - i] } else { sums[i] };
        cum += s;
        let diff = cum.abs_diff(want);
        if diff < best.1 {
            best = (i + 1, diff);
        }
        if cum >= want {
            break;
        }
    }
    best.0
}

/// Renders a sequence. Deterministic in the spec; ground truth is the
/// analytic ellipse bound, unchanged by occlusion.
pub fn render(spec: &SceneSpec) -> Result<SequenceDataset, SynthError> {
    validate(spec)?;
    let centers = target_centers(spec)?;
    let (rx, ry) = spec.radii;
    let bg_seed = spec.seed ^ 0x6267_7465_78;
    let bg_amp = 0.28 * spec.clutter.clamp(0.0, 1.0);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    let mut occ = Vec::with_capacity(spec.frames);
    for (t, &(cx, cy)) in centers.iter().enumerate() {
        let mut frame = Frame::new(spec.width, spec.height);
        for y in 0..spec.height {
            for x in 0..spec.width {
                frame.set_pixel(
                    x,
                    y,
                    texture_pixel(x as f32, y as f32, bg_seed, 16.0, 0.47, bg_amp),
                );
            }
        }
        let raster = rasterize_target(spec, cx, cy);
        for y in 0..raster.h {
            for x in 0..raster.w {
                if raster.mask[y * raster.w + x] {
                    let (fx, fy) = ((raster.x0 + x) as f32, (raster.y0 + y) as f32);
                    frame.set_pixel(
                        raster.x0 + x,
                        raster.y0 + y,
                        texture_pixel(fx - cx, fy - cy, spec.target_seed, 4.0, 0.5, 0.85),
                    );
                }
            }
        }
        let mut covered = vec![false; raster.mask.len()];
        for ev in &spec.events {
            let c = ev.coverage_at(t);
            if c <= 0.0 || raster.area == 0 {
                continue;
            }
            let want = libm::round(c as f64 * raster.area as f64) as u32;
            let (horizontal, from_end) = match ev.side {
                Side::Left => (true, false),
                Side::Right => (true, true),
                Side::Top => (false, false),
                Side::Bottom => (false, true),
            };
            let sums = if horizontal {
                &raster.col_sums
            } else {
                &raster.row_sums
            };
            let extent = quantile_extent(sums, from_end, want);
            if extent == 0 {
                continue;
            }
            // strip range in raster-local coordinates along the walked axis
            let len = sums.len();
            let (s0, s1) = if from_end {
                (len - extent, len)
            } else {
                (0, extent)
            };
            let in_strip = |x: usize, y: usize| {
                if horizontal {
                    x >= s0 && x < s1
                } else {
                    y >= s0 && y < s1
                }
            };
            for y in 0..raster.h {
                for x in 0..raster.w {
                    if raster.mask[y * raster.w + x] && in_strip(x, y) {
                        covered[y * raster.w + x] = true;
                    }
                }
            }
            match ev.kind {
                OccKind::Feature => {
                    // retexture covered target pixels in place
                    for y in 0..raster.h {
                        for x in 0..raster.w {
                            if raster.mask[y * raster.w + x] && in_strip(x, y) {
                                let (fx, fy) =
                                    ((raster.x0 + x) as f32, (raster.y0 + y) as f32);
                                frame.set_pixel(
                                    raster.x0 + x,
                                    raster.y0 + y,
                                    texture_pixel(
                                        fx - cx,
                                        fy - cy,
                                        ev.texture_seed,
                                        4.0,
                                        0.45,
                                        0.8,
                                    ),
                                );
                            }
                        }
                    }
                }
                OccKind::Patch => {
                    // opaque rectangle from the frame edge to the strip edge,
                    // spanning the target with a margin on the cross axis
                    let m = 4usize;
                    let (px0, px1, py0, py1) = if horizontal {
                        let (sx0, sx1) = if from_end {
                            (raster.x0 + s0, spec.width)
                        } else {
                            (0, raster.x0 + s1)
                        };
                        (
                            sx0,
                            sx1,
                            raster.y0.saturating_sub(m),
                            (raster.y0 + raster.h + m).min(spec.height),
                        )
                    } else {
                        let (sy0, sy1) = if from_end {
                            (raster.y0 + s0, spec.height)
                        } else {
                            (0, raster.y0 + s1)
                        };
                        (
                            raster.x0.saturating_sub(m),
                            (raster.x0 + raster.w + m).min(spec.width),
                            sy0,
                            sy1,
                        )
                    };
                    for y in py0..py1 {
                        for x in px0..px1 {
                            frame.set_pixel(
                                x,
                                y,
                                texture_pixel(x as f32, y as f32, ev.texture_seed, 6.0, 0.5, 0.8),
                            );
                        }
                    }
                }
            }
        }
        let covered_count = covered.iter().filter(|&&c| c).count();
        let frac = if raster.area == 0 {
            0.0
        } else {
            covered_count as f64 / raster.area as f64
        };
        frames.push(frame);
        gt.push(BBox::new(cx - rx, cy - ry, 2.0 * rx, 2.0 * ry));
        occ.push(frac);
    }
    Ok(SequenceDataset {
        frames,
        gt,
        occ_fraction: occ,
        spec: spec.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchProfile {
    Easy,
    OcclusionHeavy,
}

impl BenchProfile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(BenchProfile::Easy),
            "occlusion-heavy" => Some(BenchProfile::OcclusionHeavy),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchProfile::Easy => "easy",
            BenchProfile::OcclusionHeavy => "occlusion-heavy",
        }
    }
}

pub const BENCH_FRAME_SIZE: usize = 256;
pub const BENCH_SEQ_LEN: usize = 120;

/// Deterministic suite specs. Easy keeps every occlusion fraction under
/// 0.1; occlusion-heavy drives at least 40% of each sequence's frames past
/// fraction 0.3 (audited after rendering in `make_benchmark`).
pub fn make_benchmark_specs(
    profile: BenchProfile,
    count: usize,
    seed: u64,
) -> Result<Vec<SceneSpec>, SynthError> {
    if count == 0 {
        return Err(SynthError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6265_6E63_68);
    let size = BENCH_FRAME_SIZE;
    let frames = BENCH_SEQ_LEN;
    let sides = [Side::Left, Side::Right, Side::Top, Side::Bottom];
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let rx: f32 = rng.random_range(18.0..28.0);
        let ry: f32 = rng.random_range(18.0..28.0);
        let margin_x = rx + 6.0;
        let margin_y = ry + 6.0;
        let cx = rng.random_range(margin_x..(size as f32 - margin_x));
        let cy = rng.random_range(margin_y..(size as f32 - margin_y));
        let motion = if i % 3 == 2 {
            MotionModel::RandomWalk {
                step: rng.random_range(0.6..1.2),
            }
        } else {
            let angle: f32 = rng.random_range(0.0..core::f32::consts::TAU);
            let speed: f32 = rng.random_range(0.5..1.4);
            MotionModel::Linear {
                velocity: (speed * libm::cosf(angle), speed * libm::sinf(angle)),
            }
        };
        let events = match profile {
            BenchProfile::Easy => {
                if i % 2 == 1 {
                    vec![OccEvent {
                        kind: OccKind::Patch,
                        side: sides[i % 4],
                        onset: 40 + (i % 5) * 6,
                        duration: 24,
                        peak_coverage: 0.04,
                        texture_seed: rng.random(),
                    }]
                } else {
                    Vec::new()
                }
            }
            BenchProfile::OcclusionHeavy => {
                let mut evs = vec![OccEvent {
                    kind: OccKind::Patch,
                    side: sides[i % 4],
                    onset: 12 + (i % 7),
                    duration: 80,
                    peak_coverage: rng.random_range(0.62..0.72),
                    texture_seed: rng.random(),
                }];
                if i % 2 == 1 {
                    evs.push(OccEvent {
                        kind: OccKind::Feature,
                        side: sides[(i + 2) % 4],
                        onset: 102,
                        duration: 14,
                        peak_coverage: 0.35,
                        texture_seed: rng.random(),
                    });
                }
                evs
            }
        };
        specs.push(SceneSpec {
            width: size,
            height: size,
            frames,
            radii: (rx, ry),
            start_center: (cx, cy),
            motion,
            events,
            clutter: match profile {
                BenchProfile::Easy => 0.4,
                BenchProfile::OcclusionHeavy => 0.5,
            },
            target_seed: rng.random(),
            seed: rng.random(),
        });
    }
    Ok(specs)
}

fn audit_profile(profile: BenchProfile, seq: usize, occ: &[f64]) -> Result<(), SynthError> {
    let ok = match profile {
        BenchProfile::Easy => occ.iter().all(|&f| f < 0.1),
        BenchProfile::OcclusionHeavy => {
            let heavy = occ.iter().filter(|&&f| f > 0.3).count();
            heavy * 10 >= occ.len() * 4
        }
    };
    if ok {
        Ok(())
    } else {
        Err(SynthError::ProfileUnmet { sequence: seq })
    }
}

/// Renders a full suite and audits it against the profile's bound. For
/// memory-conscious callers, `make_benchmark_specs` plus per-sequence
/// `render` (and `audit` via the returned fractions) streams instead.
pub fn make_benchmark(
    profile: BenchProfile,
    count: usize,
    seed: u64,
) -> Result<Vec<SequenceDataset>, SynthError> {
    let specs = make_benchmark_specs(profile, count, seed)?;
    let mut out = Vec::with_capacity(count);
    for (i, spec) in specs.iter().enumerate() {
        let ds = render(spec)?;
        audit_profile(profile, i, &ds.occ_fraction)?;
        out.push(ds);
    }
    Ok(out)
}

/// Audit entry point for streamed rendering (same rule `make_benchmark`
/// applies internally).
pub fn audit_benchmark_sequence(
    profile: BenchProfile,
    seq: usize,
    occ: &[f64],
) -> Result<(), SynthError> {
    audit_profile(profile, seq, occ)
}

/// Geometry for cutting training pairs out of rendered sequences.
#[derive(Clone, Copy, Debug)]
pub struct PairConfig {
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Context margin factor on the exemplar crop.
    pub context: f32,
    pub total_stride: usize,
    pub response_size: usize,
    /// Positive-label radius around the true peak, in response cells.
    pub label_radius: f32,
    /// Largest |i - j| between exemplar and search frames.
    pub max_gap: usize,
    /// Largest search-center jitter, in response cells.
    pub jitter: f32,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            exemplar_size: 64,
            search_size: 128,
            context: 0.5,
            total_stride: 8,
            response_size: 9,
            label_radius: 1.5,
            max_gap: 30,
            jitter: 2.5,
        }
    }
}

/// Context-padded square crop side for a box: sqrt((w+p)(h+p)) with
/// p = context * (w+h). The tracker uses the same rule.
pub fn context_side(bbox: &BBox, context: f32) -> f32 {
    let p = context * (bbox.w + bbox.h);
    libm::sqrtf((bbox.w + p) * (bbox.h + p))
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub exemplar: FeatureMap,
    pub search: FeatureMap,
    /// Response-sized map of +1 within the label radius, -1 outside.
    pub label: FeatureMap,
}

/// Builds a signed label map for a true peak at `offset` cells from center.
pub fn label_map(size: usize, offset: (f32, f32), radius: f32) -> FeatureMap {
    let mid = (size - 1) as f32 / 2.0;
    let (ty, tx) = (mid + offset.0, mid + offset.1);
    FeatureMap::from_fn(1, size, size, |_, y, x| {
        let dy = y as f32 - ty;
        let dx = x as f32 - tx;
        if dy * dy + dx * dx <= radius * radius {
            1.0
        } else {
            -1.0
        }
    })
}

/// Samples exemplar/search/label triples. The exemplar is the frame-i
/// target crop; the search crop comes from a frame at most `max_gap` away,
/// centered on that frame's target with a jittered offset; the label marks
/// the induced displacement. Deterministic in (datasets, seed).
pub fn training_pairs(
    datasets: &[SequenceDataset],
    pairs_per_seq: usize,
    cfg: &PairConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>, SynthError> {
    if datasets.is_empty() {
        return Err(SynthError::EmptyDatasets);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972_73);
    let mut out = Vec::with_capacity(datasets.len() * pairs_per_seq);
    for ds in datasets {
        let n = ds.frames.len();
        if n < 2 {
            return Err(SynthError::SequenceTooShort);
        }
        for _ in 0..pairs_per_seq {
            let i = rng.random_range(0..n);
            let lo = i.saturating_sub(cfg.max_gap);
            let hi = (i + cfg.max_gap).min(n - 1);
            let j = rng.random_range(lo..=hi);
            let side_z = context_side(&ds.gt[i], cfg.context);
            let exemplar = crop_resize(
                &ds.frames[i],
                center_of(&ds.gt[i]),
                side_z,
                cfg.exemplar_size,
            );
            let side_x =
                context_side(&ds.gt[j], cfg.context) * cfg.search_size as f32
                    / cfg.exemplar_size as f32;
            let px_per_cell = cfg.total_stride as f32 * side_x / cfg.search_size as f32;
            let jy: f32 = rng.random_range(-cfg.jitter..=cfg.jitter);
            let jx: f32 = rng.random_range(-cfg.jitter..=cfg.jitter);
            let (cx, cy) = center_of(&ds.gt[j]);
            let search = crop_resize(
                &ds.frames[j],
                (cx + jx * px_per_cell, cy + jy * px_per_cell),
                side_x,
                cfg.search_size,
            );
            // crop center sits at +jitter from the target, so the target
            // appears at -jitter in the response
            let label = label_map(cfg.response_size, (-jy, -jx), cfg.label_radius);
            out.push(TrainingPair {
                exemplar,
                search,
                label,
            });
        }
    }
    Ok(out)
}

fn center_of(b: &BBox) -> (f32, f32) {
    let (cx, cy) = b.center();
    (cx as f32, cy as f32)
}

//! One-pass-evaluation metrics: center-error precision, success curves and
//! their area, average overlap, success rates, and the per-frame
//! IoU-gain-vs-occlusion analysis.
//!
//! Frame 1 is the initialization frame and is excluded from every metric.
//! All arithmetic is f64 so fixture values are reproducible to 1e-9.

use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use crate::bbox::BBox;
use crate::combine::Prediction;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    LengthMismatch,
    Empty,
    /// A single-frame run has nothing to evaluate once frame 1 is excluded.
    NoEvaluationFrames,
    FirstFrameNotGroundTruth,
    MissingOcclusion,
    /// Gain analysis requires two runs over the same sequence.
    MismatchedRuns,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch => write!(f, "per-frame series lengths differ"),
            MetricsError::Empty => write!(f, "no frames"),
            MetricsError::NoEvaluationFrames => {
                write!(f, "nothing to evaluate after excluding the init frame")
            }
            MetricsError::FirstFrameNotGroundTruth => {
                write!(f, "first prediction must equal the init ground truth")
            }
            MetricsError::MissingOcclusion => write!(f, "run carries no occlusion fractions"),
            MetricsError::MismatchedRuns => write!(f, "runs cover different sequences"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// One tracker run over one sequence.
#[derive(Clone, Debug)]
pub struct RunResult {
    sequence_id: String,
    preds: Vec<Prediction>,
    gt: Vec<BBox>,
    occ: Option<Vec<f64>>,
}

impl RunResult {
    pub fn new(
        sequence_id: String,
        preds: Vec<Prediction>,
        gt: Vec<BBox>,
        occ: Option<Vec<f64>>,
    ) -> Result<Self, MetricsError> {
        if preds.is_empty() || gt.is_empty() {
            return Err(MetricsError::Empty);
        }
        if preds.len() != gt.len() || occ.as_ref().is_some_and(|o| o.len() != gt.len()) {
            return Err(MetricsError::LengthMismatch);
        }
        let (p, g) = (preds[0].bbox, gt[0]);
        if (p.x, p.y, p.w, p.h) != (g.x, g.y, g.w, g.h) {
            return Err(MetricsError::FirstFrameNotGroundTruth);
        }
        Ok(RunResult {
            sequence_id,
            preds,
            gt,
            occ,
        })
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    pub fn preds(&self) -> &[Prediction] {
        &self.preds
    }

    pub fn gt(&self) -> &[BBox] {
        &self.gt
    }

    pub fn occ(&self) -> Option<&[f64]> {
        self.occ.as_deref()
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    /// Per-frame IoU for evaluation frames (frame 1 dropped).
    fn eval_ious(&self) -> Result<Vec<f64>, MetricsError> {
        if self.len() < 2 {
            return Err(MetricsError::NoEvaluationFrames);
        }
        Ok((1..self.len())
            .map(|i| self.preds[i].bbox.iou(&self.gt[i]))
            .collect())
    }

    fn eval_center_errors(&self) -> Result<Vec<f64>, MetricsError> {
        if self.len() < 2 {
            return Err(MetricsError::NoEvaluationFrames);
        }
        Ok((1..self.len())
            .map(|i| self.preds[i].bbox.center_distance(&self.gt[i]))
            .collect())
    }
}

pub const SUCCESS_GRID_POINTS: usize = 101;
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;

/// Fraction of evaluation frames whose center error is within threshold_px.
pub fn precision_at(run: &RunResult, threshold_px: f64) -> Result<f64, MetricsError> {
    let errs = run.eval_center_errors()?;
    let hits = errs.iter().filter(|&&e| e <= threshold_px).count();
    Ok(hits as f64 / errs.len() as f64)
}

/// Success curve on the 0..1 grid with step 0.01 (strict IoU > threshold),
/// and its mean as the area under the curve.
pub fn success_auc(run: &RunResult) -> Result<(Vec<f64>, f64), MetricsError> {
    let ious = run.eval_ious()?;
    let curve: Vec<f64> = (0..SUCCESS_GRID_POINTS)
        .map(|i| {
            let tau = i as f64 / 100.0;
            ious.iter().filter(|&&v| v > tau).count() as f64 / ious.len() as f64
        })
        .collect();
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((curve, auc))
}

/// (average overlap, success rate at 0.5, success rate at 0.75); the rates
/// use strict comparison.
pub fn got_metrics(run: &RunResult) -> Result<(f64, f64, f64), MetricsError> {
    let ious = run.eval_ious()?;
    let n = ious.len() as f64;
    let ao = ious.iter().sum::<f64>() / n;
    let sr = |tau: f64| ious.iter().filter(|&&v| v > tau).count() as f64 / n;
    Ok((ao, sr(0.5), sr(0.75)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

pub fn report(run: &RunResult) -> Result<MetricsReport, MetricsError> {
    let precision = precision_at(run, PRECISION_THRESHOLD_PX)?;
    let (success_curve, auc) = success_auc(run)?;
    let (ao, sr50, sr75) = got_metrics(run)?;
    Ok(MetricsReport {
        precision,
        success_curve,
        auc,
        ao,
        sr50,
        sr75,
    })
}

/// Unweighted mean of per-sequence reports (every sequence counts equally
/// regardless of length).
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = reports.len() as f64;
    let mut curve = alloc::vec![0.0f64; SUCCESS_GRID_POINTS];
    for r in reports {
        for (acc, v) in curve.iter_mut().zip(&r.success_curve) {
            *acc += v / n;
        }
    }
    Ok(MetricsReport {
        precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
        success_curve: curve,
        auc: reports.iter().map(|r| r.auc).sum::<f64>() / n,
        ao: reports.iter().map(|r| r.ao).sum::<f64>() / n,
        sr50: reports.iter().map(|r| r.sr50).sum::<f64>() / n,
        sr75: reports.iter().map(|r| r.sr75).sum::<f64>() / n,
    })
}

/// One evaluation frame of a two-run comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainRow {
    /// Frame index in the sequence (starts at 1; frame 0 is init).
    pub frame: usize,
    pub iou_a: f64,
    pub iou_b: f64,
    /// iou_b - iou_a
    pub delta: f64,
    pub occ: f64,
}

#[derive(Clone, Debug)]
pub struct GainAnalysis {
    pub sequence_id: String,
    pub rows: Vec<GainRow>,
    /// Rank correlation between delta and occlusion fraction; None when
    /// either series is constant over the sequence.
    pub rank_correlation: Option<f64>,
}

/// Per-frame IoU change from run a to run b against occlusion fraction.
/// Both runs must cover the same sequence (same id and ground truth) and
/// carry occlusion fractions.
pub fn occlusion_gain_analysis(
    run_a: &RunResult,
    run_b: &RunResult,
) -> Result<GainAnalysis, MetricsError> {
    if run_a.sequence_id != run_b.sequence_id || run_a.len() != run_b.len() {
        return Err(MetricsError::MismatchedRuns);
    }
    for (a, b) in run_a.gt.iter().zip(&run_b.gt) {
        if (a.x, a.y, a.w, a.h) != (b.x, b.y, b.w, b.h) {
            return Err(MetricsError::MismatchedRuns);
        }
    }
    let occ = run_a.occ().ok_or(MetricsError::MissingOcclusion)?;
    if run_b.occ().is_some_and(|o| o != occ) {
        return Err(MetricsError::MismatchedRuns);
    }
    let ious_a = run_a.eval_ious()?;
    let ious_b = run_b.eval_ious()?;
    let rows: Vec<GainRow> = ious_a
        .iter()
        .zip(&ious_b)
        .enumerate()
        .map(|(i, (&ia, &ib))| GainRow {
            frame: i + 1,
            iou_a: ia,
            iou_b: ib,
            delta: ib - ia,
            occ: occ[i + 1],
        })
        .collect();
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let occs: Vec<f64> = rows.iter().map(|r| r.occ).collect();
    Ok(GainAnalysis {
        sequence_id: run_a.sequence_id.clone(),
        rows,
        rank_correlation: spearman(&deltas, &occs),
    })
}

/// Rank correlation pooled over every row of several analyses (frames from
/// all sequences ranked together).
pub fn pooled_rank_correlation(analyses: &[GainAnalysis]) -> Option<f64> {
    let deltas: Vec<f64> = analyses
        .iter()
        .flat_map(|a| a.rows.iter().map(|r| r.delta))
        .collect();
    let occs: Vec<f64> = analyses
        .iter()
        .flat_map(|a| a.rows.iter().map(|r| r.occ))
        .collect();
    spearman(&deltas, &occs)
}

/// Average ranks with ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap_or(core::cmp::Ordering::Equal));
    let mut ranks = alloc::vec![0.0f64; xs.len()];
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        while j + 1 < xs.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share one value; ranks are 1-based
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks. None
/// for mismatched or too-short inputs, or when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / libm::sqrt(vx * vy))
}

//! Capacity sweeps: prune at every capacity of a range, evaluate, keep the curve.

use std::fmt;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActionId, DetectionStore, GroundTruthStore};
use crate::metrics::{mean_average_precision, EvalError, EvalReport};
use crate::output::write_atomic;
use crate::prune::{prune, PruneMode};

/// Inclusive capacity range `lo..=hi` stepped by `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapacityRange {
    pub lo: usize,
    pub hi: usize,
    pub step: usize,
}

impl Default for CapacityRange {
    fn default() -> Self {
        Self {
            lo: 50,
            hi: 2200,
            step: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RangeError {
    #[error("capacity range must satisfy 1 <= lo <= hi and step >= 1 (got {0}:{1}:{2})")]
    Invalid(usize, usize, usize),
    #[error("cannot parse capacity range {0:?}: expected lo:hi[:step]")]
    Syntax(String),
}

impl CapacityRange {
    pub fn new(lo: usize, hi: usize, step: usize) -> Result<Self, RangeError> {
        if lo == 0 || lo > hi || step == 0 {
            return Err(RangeError::Invalid(lo, hi, step));
        }
        Ok(Self { lo, hi, step })
    }

    pub fn capacities(&self) -> impl Iterator<Item = usize> {
        (self.lo..=self.hi).step_by(self.step)
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo) / self.step + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for CapacityRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.step)
    }
}

impl FromStr for CapacityRange {
    type Err = RangeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match nums.as_deref() {
            Some([lo, hi]) => Self::new(*lo, *hi, 1),
            Some([lo, hi, step]) => Self::new(*lo, *hi, *step),
            _ => Err(RangeError::Syntax(s.to_string())),
        }
    }
}

impl Serialize for CapacityRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CapacityRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the range is visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// Every capacity of the range.
    #[default]
    Exhaustive,
    /// Every `coarse_step`-th capacity first, then step 1 within one coarse
    /// step of the coarse argmax.
    TwoPass { coarse_step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub action_id: ActionId,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub capacity: usize,
    pub map: f64,
    pub ap_std: f64,
    pub per_class: Vec<ClassAp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub capacity: usize,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: Best,
    /// Ascending by capacity, one per evaluated capacity.
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Builds a result from points, selecting the smallest capacity at the maximum mAP.
    pub fn from_points(mut points: Vec<SweepPoint>) -> Option<Self> {
        points.sort_by_key(|p| p.capacity);
        points.dedup_by_key(|p| p.capacity);
        let mut best: Option<Best> = None;
        for p in &points {
            if best.is_none_or(|b| p.map > b.map) {
                best = Some(Best {
                    capacity: p.capacity,
                    map: p.map,
                });
            }
        }
        Some(Self {
            best: best?,
            points,
        })
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("worker count must be at least 1")]
    ZeroWorkers,
    #[error("coarse step must be at least 2 and larger than the range step")]
    BadCoarseStep,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// Prunes at `capacity` and evaluates; one sweep point.
pub fn evaluate_capacity(
    dets: &DetectionStore,
    gts: &GroundTruthStore,
    capacity: usize,
    mode: PruneMode,
    iou_threshold: f64,
) -> Result<SweepPoint, EvalError> {
    let pruned = prune(dets, capacity, mode).expect("capacities are >= 1");
    let report = mean_average_precision(&pruned, gts, iou_threshold)?;
    Ok(point_from_report(capacity, &report))
}

pub fn point_from_report(capacity: usize, report: &EvalReport) -> SweepPoint {
    SweepPoint {
        capacity,
        map: report.map,
        ap_std: report.ap_std(),
        per_class: report
            .scored()
            .map(|(action_id, ap)| ClassAp { action_id, ap })
            .collect(),
    }
}

fn evaluate_all(
    dets: &DetectionStore,
    gts: &GroundTruthStore,
    caps: &[usize],
    mode: PruneMode,
    iou_threshold: f64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<SweepPoint>, EvalError> {
    pool.install(|| {
        caps.par_iter()
            .map(|&c| evaluate_capacity(dets, gts, c, mode, iou_threshold))
            .collect()
    })
}

/// Runs the sweep on `workers` threads. Output does not depend on `workers`.
pub fn sweep(
    dets: &DetectionStore,
    gts: &GroundTruthStore,
    range: CapacityRange,
    schedule: Schedule,
    mode: PruneMode,
    iou_threshold: f64,
    workers: usize,
) -> Result<SweepResult, SweepError> {
    if workers == 0 {
        return Err(SweepError::ZeroWorkers);
    }
    if gts.is_empty() {
        return Err(EvalError::EmptyGroundTruth.into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;

    let points = match schedule {
        Schedule::Exhaustive => {
            let caps: Vec<usize> = range.capacities().collect();
            evaluate_all(dets, gts, &caps, mode, iou_threshold, &pool)?
        }
        Schedule::TwoPass { coarse_step } => {
            if coarse_step < 2 || coarse_step <= range.step {
                return Err(SweepError::BadCoarseStep);
            }
            let mut caps: Vec<usize> = (range.lo..=range.hi).step_by(coarse_step).collect();
            if caps.last() != Some(&range.hi) {
                caps.push(range.hi);
            }
            let coarse = evaluate_all(dets, gts, &caps, mode, iou_threshold, &pool)?;
            let centre = SweepResult::from_points(coarse.clone())
                .expect("coarse pass is non-empty")
                .best
                .capacity;
            let lo = centre.saturating_sub(coarse_step).max(range.lo);
            let hi = (centre + coarse_step).min(range.hi);
            let fine: Vec<usize> = (lo..=hi).filter(|c| !caps.contains(c)).collect();
            let mut all = coarse;
            all.extend(evaluate_all(dets, gts, &fine, mode, iou_threshold, &pool)?);
            all
        }
    };
    Ok(SweepResult::from_points(points).expect("capacity ranges are non-empty"))
}

/// Curve CSV: `capacity,map,ap_std`, six decimals.
pub fn curve_csv(result: &SweepResult) -> String {
    let mut s = String::from("capacity,map,ap_std\n");
    for p in &result.points {
        writeln!(s, "{},{:.6},{:.6}", p.capacity, p.map, p.ap_std).unwrap();
    }
    s
}

pub fn emit_curve(result: &SweepResult, path: &Path) -> io::Result<()> {
    write_atomic(path, curve_csv(result).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApDelta {
    pub action_id: ActionId,
    pub ap_a: f64,
    pub ap_b: f64,
    pub delta: f64,
    pub top5: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("the two reports share no scored classes")]
    NoSharedClasses,
}

/// Per-class `ap_a - ap_b` over shared classes, largest magnitude first
/// (ties by class id); the first five are flagged.
pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<Vec<ApDelta>, CompareError> {
    let b_aps: std::collections::BTreeMap<ActionId, f64> = b.scored().collect();
    let mut rows: Vec<ApDelta> = a
        .scored()
        .filter_map(|(id, ap_a)| {
            b_aps.get(&id).map(|&ap_b| ApDelta {
                action_id: id,
                ap_a,
                ap_b,
                delta: ap_a - ap_b,
                top5: false,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(CompareError::NoSharedClasses);
    }
    rows.sort_by(|x, y| {
        y.delta
            .abs()
            .total_cmp(&x.delta.abs())
            .then(x.action_id.cmp(&y.action_id))
    });
    for r in rows.iter_mut().take(5) {
        r.top5 = true;
    }
    Ok(rows)
}

pub fn deltas_csv(rows: &[ApDelta]) -> String {
    let mut s = String::from("action_id,ap_a,ap_b,delta,top5\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{}",
            r.action_id, r.ap_a, r.ap_b, r.delta, r.top5
        )
        .unwrap();
    }
    s
}

//! IoU, greedy per-class matching, average precision and frame-mAP.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ActionId, BoundingBox, DetectionStore, FrameKey, GroundTruthStore};
use crate::prune::Rank;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One detection of a single class, ready for ranking.
#[derive(Debug, Clone)]
pub struct ClassDetection<'a> {
    pub key: &'a FrameKey,
    pub bbox: BoundingBox,
    pub score: f64,
    /// Position in detection-store order.
    pub tie: usize,
}

impl ClassDetection<'_> {
    pub fn rank(&self) -> Rank {
        Rank {
            score: self.score,
            tie: self.tie,
        }
    }
}

/// Sorts by `(score desc, tie asc)`.
pub fn rank_detections(dets: &mut [ClassDetection<'_>]) {
    dets.sort_by_key(|d| std::cmp::Reverse(d.rank()));
}

/// Ground-truth boxes of one class, indexed by frame. Ids are positions in
/// ground-truth store order.
#[derive(Debug, Clone, Default)]
pub struct ClassGroundTruth<'a> {
    pub by_frame: HashMap<&'a FrameKey, Vec<(usize, BoundingBox)>>,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchEntry {
    pub score: f64,
    pub tie: usize,
    pub true_positive: bool,
    pub matched_gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detections in rank order with their TP/FP flag.
    pub entries: Vec<MatchEntry>,
    /// Ground-truth positives of the class (M).
    pub positives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.entries.iter().filter(|e| e.true_positive).count()
    }

    pub fn false_positives(&self) -> usize {
        self.entries.len() - self.true_positives()
    }

    /// Builds a result from a bare TP/FP flag sequence, already ranked.
    pub fn from_flags(flags: &[bool], positives: usize) -> Self {
        Self {
            entries: flags
                .iter()
                .enumerate()
                .map(|(i, &tp)| MatchEntry {
                    score: 1.0,
                    tie: i,
                    true_positive: tp,
                    matched_gt: None,
                })
                .collect(),
            positives,
        }
    }
}

/// Greedy matching in rank order: each detection claims the highest-IoU
/// unmatched ground truth in its frame with IoU >= `threshold` (lowest id on
/// equal IoU). `dets` must already be ranked.
pub fn match_class(
    dets: &[ClassDetection<'_>],
    gts: &ClassGroundTruth<'_>,
    threshold: f64,
) -> MatchResult {
    debug_assert!(dets.windows(2).all(|w| w[0].rank() > w[1].rank()));
    let mut claimed: HashSet<usize> = HashSet::new();
    let entries = dets
        .iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            if let Some(cands) = gts.by_frame.get(d.key) {
                for &(id, ref gt) in cands {
                    if claimed.contains(&id) {
                        continue;
                    }
                    let v = iou(&d.bbox, gt);
                    if v >= threshold && best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, id));
                    }
                }
            }
            if let Some((_, id)) = best {
                claimed.insert(id);
            }
            MatchEntry {
                score: d.score,
                tie: d.tie,
                true_positive: best.is_some(),
                matched_gt: best.map(|(_, id)| id),
            }
        })
        .collect();
    MatchResult {
        entries,
        positives: gts.positives,
    }
}

/// Non-interpolated AP: the sum of precision at each true-positive rank,
/// divided by the positive count. `None` when the class has no positives.
pub fn average_precision(m: &MatchResult) -> Option<f64> {
    if m.positives == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, e) in m.entries.iter().enumerate() {
        if e.true_positive {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Some(sum / m.positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub action_id: ActionId,
    /// `null` for classes that only appear in detections.
    pub ap: Option<f64>,
    pub m: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub iou_threshold: f64,
    pub n_classes: usize,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    /// `(action_id, ap)` for every class included in the mean.
    pub fn scored(&self) -> impl Iterator<Item = (ActionId, f64)> + '_ {
        self.per_class
            .iter()
            .filter_map(|c| c.ap.map(|ap| (c.action_id, ap)))
    }

    /// Population standard deviation of the included per-class APs.
    pub fn ap_std(&self) -> f64 {
        let aps: Vec<f64> = self.scored().map(|(_, ap)| ap).collect();
        if aps.is_empty() {
            return 0.0;
        }
        let n = aps.len() as f64;
        let mean = aps.iter().sum::<f64>() / n;
        (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("ground truth is empty: nothing to evaluate")]
    EmptyGroundTruth,
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
}

/// Frame-mAP: per-class AP with global ranking across frames, averaged over
/// the classes present in ground truth.
pub fn mean_average_precision(
    dets: &DetectionStore,
    gts: &GroundTruthStore,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::BadThreshold(iou_threshold));
    }
    if gts.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }

    let mut gt_by_class: BTreeMap<ActionId, ClassGroundTruth<'_>> = BTreeMap::new();
    for (id, g) in gts.records().enumerate() {
        let c = gt_by_class.entry(g.action_id).or_default();
        c.by_frame.entry(&g.key).or_default().push((id, g.bbox));
        c.positives += 1;
    }
    let mut det_by_class: BTreeMap<ActionId, Vec<ClassDetection<'_>>> = BTreeMap::new();
    for (tie, d) in dets.records().enumerate() {
        det_by_class.entry(d.action_id).or_default().push(ClassDetection {
            key: &d.key,
            bbox: d.bbox,
            score: d.score,
            tie,
        });
    }

    let empty = ClassGroundTruth::default();
    let mut classes: Vec<ActionId> = gt_by_class.keys().chain(det_by_class.keys()).copied().collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::with_capacity(classes.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for class in classes {
        let mut ranked = det_by_class.remove(&class).unwrap_or_default();
        rank_detections(&mut ranked);
        let gt = gt_by_class.get(&class).unwrap_or(&empty);
        let m = match_class(&ranked, gt, iou_threshold);
        let ap = average_precision(&m);
        if let Some(ap) = ap {
            sum += ap;
            n += 1;
        }
        per_class.push(ClassReport {
            action_id: class,
            ap,
            m: m.positives,
            tp: m.true_positives(),
            fp: m.false_positives(),
        });
    }

    Ok(EvalReport {
        map: sum / n as f64,
        iou_threshold,
        n_classes: n,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Detection, GroundTruth};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = bb(0.1, 0.1, 0.4, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(0.5, 0.5, 0.9, 0.9)), 0.0);
        // touching edges have zero intersection
        assert_eq!(iou(&a, &bb(0.4, 0.1, 0.6, 0.5)), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // intersection 0.01, union 0.04 + 0.04 - 0.01 = 0.07
        let v = iou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.1, 0.1, 0.3, 0.3));
        assert!((v - 1.0 / 7.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ap_closed_forms() {
        assert_eq!(average_precision(&MatchResult::from_flags(&[true], 1)), Some(1.0));
        let ap = average_precision(&MatchResult::from_flags(&[true, false, true], 2)).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&MatchResult::from_flags(&[false, false], 3)), Some(0.0));
        assert_eq!(average_precision(&MatchResult::from_flags(&[false], 0)), None);
    }

    fn key() -> FrameKey {
        FrameKey::new("v", 1)
    }

    #[test]
    fn single_perfect_match() {
        let k = key();
        let g = bb(0.1, 0.1, 0.5, 0.5);
        let mut gt = ClassGroundTruth::default();
        gt.by_frame.insert(&k, vec![(0, g)]);
        gt.positives = 1;
        let dets = [ClassDetection { key: &k, bbox: g, score: 0.9, tie: 0 }];
        let m = match_class(&dets, &gt, 0.5);
        assert!(m.entries[0].true_positive);
        assert_eq!(m.entries[0].matched_gt, Some(0));
        assert_eq!(m.positives, 1);
    }

    #[test]
    fn one_gt_matches_only_once() {
        let k = key();
        let g = bb(0.1, 0.1, 0.5, 0.5);
        let mut gt = ClassGroundTruth::default();
        gt.by_frame.insert(&k, vec![(0, g)]);
        gt.positives = 1;
        let mut dets = vec![
            ClassDetection { key: &k, bbox: bb(0.12, 0.1, 0.5, 0.5), score: 0.6, tie: 0 },
            ClassDetection { key: &k, bbox: bb(0.1, 0.1, 0.52, 0.5), score: 0.8, tie: 1 },
        ];
        rank_detections(&mut dets);
        let m = match_class(&dets, &gt, 0.5);
        let flags: Vec<(f64, bool)> = m.entries.iter().map(|e| (e.score, e.true_positive)).collect();
        assert_eq!(flags, vec![(0.8, true), (0.6, false)]);
    }

    #[test]
    fn unmatched_detection_prefers_next_best_free_gt() {
        let k = key();
        let g0 = bb(0.1, 0.1, 0.5, 0.5);
        let g1 = bb(0.15, 0.1, 0.55, 0.5);
        let mut gt = ClassGroundTruth::default();
        gt.by_frame.insert(&k, vec![(0, g0), (1, g1)]);
        gt.positives = 2;
        let dets = [
            ClassDetection { key: &k, bbox: g0, score: 0.9, tie: 0 },
            ClassDetection { key: &k, bbox: g0, score: 0.8, tie: 1 },
        ];
        let m = match_class(&dets, &gt, 0.5);
        assert_eq!(m.entries[0].matched_gt, Some(0));
        assert_eq!(m.entries[1].matched_gt, Some(1));
    }

    fn gt_row(ts: u64, b: BoundingBox, a: ActionId) -> GroundTruth {
        GroundTruth { key: FrameKey::new("v", ts), bbox: b, action_id: a }
    }

    #[test]
    fn perfect_detections_give_map_one() {
        let gts = GroundTruthStore::from_records([
            gt_row(1, bb(0.1, 0.1, 0.3, 0.3), 1),
            gt_row(1, bb(0.5, 0.5, 0.9, 0.9), 2),
            gt_row(2, bb(0.2, 0.2, 0.6, 0.6), 1),
        ]);
        let dets = DetectionStore::from_records(gts.records().map(|g| Detection {
            key: g.key.clone(),
            bbox: g.bbox,
            action_id: g.action_id,
            score: 1.0,
        }));
        let r = mean_average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.n_classes, 2);
    }

    #[test]
    fn detection_only_classes_are_reported_but_not_averaged() {
        let b = bb(0.1, 0.1, 0.3, 0.3);
        let gts = GroundTruthStore::from_records([gt_row(1, b, 1)]);
        let dets = DetectionStore::from_records([
            Detection { key: FrameKey::new("v", 1), bbox: b, action_id: 1, score: 0.5 },
            Detection { key: FrameKey::new("v", 1), bbox: b, action_id: 5, score: 0.9 },
        ]);
        let r = mean_average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.n_classes, 1);
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.per_class[1], ClassReport { action_id: 5, ap: None, m: 0, tp: 0, fp: 1 });
    }

    #[test]
    fn map_is_mean_of_class_aps() {
        // class 1: [TP] of M=1 -> 1.0; class 2: M=2, one TP at rank 1 -> 0.5
        let b1 = bb(0.1, 0.1, 0.3, 0.3);
        let b2 = bb(0.5, 0.5, 0.7, 0.7);
        let gts = GroundTruthStore::from_records([gt_row(1, b1, 1), gt_row(1, b2, 2), gt_row(2, b2, 2)]);
        let dets = DetectionStore::from_records([
            Detection { key: FrameKey::new("v", 1), bbox: b1, action_id: 1, score: 0.5 },
            Detection { key: FrameKey::new("v", 1), bbox: b2, action_id: 2, score: 0.5 },
        ]);
        let r = mean_average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.map, 0.75);
    }

    #[test]
    fn ap_std_of_known_values() {
        let r = EvalReport {
            map: 0.4,
            iou_threshold: 0.5,
            n_classes: 3,
            per_class: [0.2, 0.4, 0.6]
                .iter()
                .enumerate()
                .map(|(i, &ap)| ClassReport { action_id: i as u32 + 1, ap: Some(ap), m: 1, tp: 0, fp: 0 })
                .collect(),
        };
        let expected = (0.08f64 / 3.0).sqrt();
        assert!((r.ap_std() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let r = mean_average_precision(&DetectionStore::from_records([]), &GroundTruthStore::from_records([]), 0.5);
        assert_eq!(r, Err(EvalError::EmptyGroundTruth));
    }
}

//! Seeded synthetic detection / ground-truth scenarios.
//!
//! Every `(video, frame)` draws from its own ChaCha8 stream of the scenario
//! seed, so adding videos or frames never changes the ones already generated.
//! Coordinates and scores are rounded to six decimals, which keeps generated
//! stores stable through a CSV round trip.

use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    ActionId, BoundingBox, Detection, DetectionStore, FrameKey, GroundTruth, GroundTruthStore,
};
use crate::metrics::iou;
use crate::rng::{below, stream, uniform};

/// Ground-truth boxes of one frame overlap each other by at most this IoU.
pub const MAX_GT_OVERLAP: f64 = 0.1;
/// Easy decoys overlap every ground-truth box by at most this IoU.
pub const EASY_DECOY_MAX_IOU: f64 = 0.3;
/// Hard-negative decoys overlap one ground-truth box with IoU in `(0.3, 0.5)`.
pub const HARD_DECOY_IOU: (f64, f64) = (0.3, 0.5);
/// Side lengths of generated boxes, normalized.
pub const BOX_SIDE: (f64, f64) = (0.08, 0.25);
/// First keyframe timestamp of every video.
pub const FIRST_TIMESTAMP: u64 = 902;

const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub const fn exactly(n: usize) -> Self {
        Self { min: n, max: n }
    }

    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl RngCore) -> usize {
        self.min + below(rng, (self.max - self.min + 1) as u64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl ScoreDist {
    fn sample(&self, rng: &mut impl RngCore) -> f64 {
        match *self {
            ScoreDist::Constant { value } => value,
            ScoreDist::Uniform { lo, hi } => uniform(rng, lo, hi),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            ScoreDist::Constant { value } => (value, value),
            ScoreDist::Uniform { lo, hi } => (lo, hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoyMode {
    /// Placed away from every ground-truth box.
    #[default]
    Easy,
    /// Shifted copies of a ground-truth box that never reach the match threshold.
    HardNegative,
}

fn one_action() -> IntRange {
    IntRange::exactly(1)
}

fn unit_gain() -> ScoreDist {
    ScoreDist::Constant { value: 1.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub n_classes: usize,
    pub actors_per_frame: IntRange,
    /// Distinct action labels per actor.
    #[serde(default = "one_action")]
    pub actions_per_actor: IntRange,
    pub tp_score_dist: ScoreDist,
    pub fp_score_dist: ScoreDist,
    pub fp_per_frame: IntRange,
    /// Per-frame multiplier applied to every score in the frame.
    #[serde(default = "unit_gain")]
    pub frame_gain: ScoreDist,
    /// Maximum absolute perturbation of each detection coordinate.
    pub jitter: f64,
    #[serde(default)]
    pub decoy_mode: DecoyMode,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot place {what} in frame {key} after {MAX_ATTEMPTS} attempts")]
    Infeasible { key: FrameKey, what: &'static str },
}

impl ScenarioSpec {
    /// 20 frames, 3 classes, moderate jitter and decoys.
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            n_videos: 4,
            frames_per_video: 5,
            n_classes: 3,
            actors_per_frame: IntRange::new(1, 4),
            actions_per_actor: IntRange::new(1, 2),
            tp_score_dist: ScoreDist::Uniform { lo: 0.3, hi: 1.0 },
            fp_score_dist: ScoreDist::Uniform { lo: 0.0, hi: 0.9 },
            fp_per_frame: IntRange::new(0, 6),
            frame_gain: unit_gain(),
            jitter: 0.03,
            decoy_mode: DecoyMode::Easy,
        }
    }

    /// The reference layout with exact boxes, perfect scores and no decoys.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            tp_score_dist: ScoreDist::Constant { value: 1.0 },
            fp_per_frame: IntRange::exactly(0),
            jitter: 0.0,
            ..Self::reference(seed)
        }
    }

    /// Three actors per frame whose detections outrank that frame's decoys,
    /// with a per-frame gain so decoys of confident frames outrank true
    /// positives of hesitant ones. mAP peaks at capacity 3.
    pub fn adversarial(seed: u64) -> Self {
        Self {
            seed,
            n_videos: 5,
            frames_per_video: 20,
            n_classes: 4,
            actors_per_frame: IntRange::exactly(3),
            actions_per_actor: IntRange::exactly(1),
            tp_score_dist: ScoreDist::Uniform { lo: 0.8, hi: 1.0 },
            fp_score_dist: ScoreDist::Uniform { lo: 0.4, hi: 0.75 },
            fp_per_frame: IntRange::new(6, 10),
            frame_gain: ScoreDist::Uniform { lo: 0.3, hi: 1.0 },
            jitter: 0.01,
            decoy_mode: DecoyMode::Easy,
        }
    }

    /// `n_videos x 100` frames with heavy decoy load, for throughput checks.
    pub fn large(seed: u64, n_videos: usize) -> Self {
        Self {
            seed,
            n_videos,
            frames_per_video: 100,
            n_classes: 10,
            actors_per_frame: IntRange::new(1, 6),
            actions_per_actor: IntRange::new(1, 3),
            tp_score_dist: ScoreDist::Uniform { lo: 0.2, hi: 1.0 },
            fp_score_dist: ScoreDist::Uniform { lo: 0.0, hi: 0.9 },
            fp_per_frame: IntRange::new(10, 60),
            frame_gain: unit_gain(),
            jitter: 0.03,
            decoy_mode: DecoyMode::HardNegative,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_videos == 0 || self.frames_per_video == 0 || self.n_classes == 0 {
            return bad("n_videos, frames_per_video and n_classes must be >= 1".into());
        }
        if self.n_videos > u32::MAX as usize || self.frames_per_video > u32::MAX as usize {
            return bad("too many videos or frames".into());
        }
        for (name, r, min) in [
            ("actors_per_frame", self.actors_per_frame, 1),
            ("actions_per_actor", self.actions_per_actor, 1),
            ("fp_per_frame", self.fp_per_frame, 0),
        ] {
            if r.min < min || r.min > r.max {
                return bad(format!("{name} must satisfy {min} <= min <= max (got {}..{})", r.min, r.max));
            }
        }
        if self.actions_per_actor.max > self.n_classes {
            return bad("actions_per_actor.max exceeds n_classes".into());
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad(format!("jitter must lie in [0, 0.5) (got {})", self.jitter));
        }
        for (name, d) in [
            ("tp_score_dist", self.tp_score_dist),
            ("fp_score_dist", self.fp_score_dist),
            ("frame_gain", self.frame_gain),
        ] {
            let (lo, hi) = d.bounds();
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must produce values in [0,1] (got {lo}..{hi})"));
            }
        }
        Ok(())
    }
}

fn q6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn quantized_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<BoundingBox> {
    let c = |v: f64| q6(v.clamp(0.0, 1.0));
    BoundingBox::new(c(x1), c(y1), c(x2), c(y2)).ok()
}

fn random_box(rng: &mut impl RngCore) -> BoundingBox {
    let w = uniform(rng, BOX_SIDE.0, BOX_SIDE.1);
    let h = uniform(rng, BOX_SIDE.0, BOX_SIDE.1);
    let x1 = uniform(rng, 0.0, 1.0 - w);
    let y1 = uniform(rng, 0.0, 1.0 - h);
    quantized_box(x1, y1, x1 + w, y1 + h).expect("sides are at least 0.08")
}

fn max_iou(b: &BoundingBox, others: &[BoundingBox]) -> f64 {
    others.iter().map(|o| iou(b, o)).fold(0.0, f64::max)
}

fn attempt<T>(key: &FrameKey, what: &'static str, mut f: impl FnMut() -> Option<T>) -> Result<T, SynthError> {
    (0..MAX_ATTEMPTS).find_map(|_| f()).ok_or_else(|| SynthError::Infeasible {
        key: key.clone(),
        what,
    })
}

fn score(dist: &ScoreDist, gain: f64, rng: &mut impl RngCore) -> f64 {
    q6((gain * dist.sample(rng)).clamp(0.0, 1.0))
}

fn generate_frame(
    spec: &ScenarioSpec,
    key: &FrameKey,
    rng: &mut impl RngCore,
) -> Result<(Vec<Detection>, Vec<GroundTruth>), SynthError> {
    let gain = spec.frame_gain.sample(rng);
    let n_actors = spec.actors_per_frame.sample(rng);

    let mut actors: Vec<BoundingBox> = Vec::with_capacity(n_actors);
    for _ in 0..n_actors {
        let b = attempt(key, "non-overlapping actor", || {
            let b = random_box(rng);
            (max_iou(&b, &actors) <= MAX_GT_OVERLAP).then_some(b)
        })?;
        actors.push(b);
    }

    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for gt_box in &actors {
        let k = spec.actions_per_actor.sample(rng);
        let mut classes: Vec<ActionId> = (1..=spec.n_classes as ActionId).collect();
        // partial Fisher-Yates: first k entries are a uniform k-subset
        for i in 0..k {
            let j = i + below(rng, (classes.len() - i) as u64) as usize;
            classes.swap(i, j);
        }
        let det_box = if spec.jitter > 0.0 {
            let j = spec.jitter;
            attempt(key, "jittered detection", || {
                let mut d = || uniform(rng, -j, j);
                quantized_box(gt_box.x1 + d(), gt_box.y1 + d(), gt_box.x2 + d(), gt_box.y2 + d())
            })?
        } else {
            *gt_box
        };
        for &action_id in &classes[..k] {
            gts.push(GroundTruth { key: key.clone(), bbox: *gt_box, action_id });
            dets.push(Detection {
                key: key.clone(),
                bbox: det_box,
                action_id,
                score: score(&spec.tp_score_dist, gain, rng),
            });
        }
    }

    let n_fp = spec.fp_per_frame.sample(rng);
    for _ in 0..n_fp {
        let bbox = match spec.decoy_mode {
            DecoyMode::Easy => attempt(key, "easy decoy", || {
                let b = random_box(rng);
                (max_iou(&b, &actors) <= EASY_DECOY_MAX_IOU).then_some(b)
            })?,
            DecoyMode::HardNegative => attempt(key, "hard-negative decoy", || {
                let g = actors[below(rng, actors.len() as u64) as usize];
                let dx = uniform(rng, -0.6, 0.6) * g.width();
                let dy = uniform(rng, -0.6, 0.6) * g.height();
                let b = quantized_box(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy)?;
                let v = iou(&b, &g);
                let ok = v > HARD_DECOY_IOU.0 && v < HARD_DECOY_IOU.1 && max_iou(&b, &actors) < HARD_DECOY_IOU.1;
                ok.then_some(b)
            })?,
        };
        dets.push(Detection {
            key: key.clone(),
            bbox,
            action_id: 1 + below(rng, spec.n_classes as u64) as ActionId,
            score: score(&spec.fp_score_dist, gain, rng),
        });
    }

    for i in (1..dets.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        dets.swap(i, j);
    }
    Ok((dets, gts))
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:04}")
}

/// Generates paired stores. Identical specs give bit-identical stores.
pub fn generate(spec: &ScenarioSpec) -> Result<(DetectionStore, GroundTruthStore), SynthError> {
    spec.validate()?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for v in 0..spec.n_videos {
        let vid = video_id(v);
        for f in 0..spec.frames_per_video {
            let key = FrameKey::new(vid.clone(), FIRST_TIMESTAMP + f as u64);
            let mut rng = stream(spec.seed, ((v as u64) << 32) | f as u64);
            let (d, g) = generate_frame(spec, &key, &mut rng)?;
            dets.extend(d);
            gts.extend(g);
        }
    }
    Ok((DetectionStore::from_records(dets), GroundTruthStore::from_records(gts)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mean_average_precision;
    use crate::prune::{prune, PruneMode};

    #[test]
    fn noiseless_scenario_scores_perfectly() {
        let (d, g) = generate(&ScenarioSpec::noiseless(42)).unwrap();
        assert_eq!(d.len(), g.len());
        assert_eq!(mean_average_precision(&d, &g, 0.5).unwrap().map, 1.0);
    }

    #[test]
    fn confident_decoys_push_out_every_true_positive() {
        let spec = ScenarioSpec {
            actors_per_frame: IntRange::exactly(3),
            actions_per_actor: IntRange::exactly(1),
            tp_score_dist: ScoreDist::Uniform { lo: 0.1, hi: 0.5 },
            fp_score_dist: ScoreDist::Uniform { lo: 0.6, hi: 1.0 },
            fp_per_frame: IntRange::exactly(3),
            ..ScenarioSpec::reference(5)
        };
        let (d, g) = generate(&spec).unwrap();
        let pruned = prune(&d, 3, PruneMode::Box).unwrap();
        assert_eq!(mean_average_precision(&pruned, &g, 0.5).unwrap().map, 0.0);
    }

    #[test]
    fn same_spec_same_stores() {
        let spec = ScenarioSpec::reference(42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_ne!(generate(&spec).unwrap().0, generate(&ScenarioSpec::reference(43)).unwrap().0);
    }

    #[test]
    fn adding_videos_keeps_existing_frames() {
        let small = ScenarioSpec::reference(11);
        let big = ScenarioSpec { n_videos: 6, ..small.clone() };
        let (ds, gs) = generate(&small).unwrap();
        let (db, gb) = generate(&big).unwrap();
        for (k, rows) in ds.frames() {
            assert_eq!(db.frame(k).unwrap(), rows);
        }
        for (k, rows) in gs.frames() {
            assert_eq!(gb.frame(k).unwrap(), rows);
        }
    }

    #[test]
    fn labels_within_class_range_and_boxes_separated() {
        let spec = ScenarioSpec::large(3, 1);
        let (d, g) = generate(&spec).unwrap();
        assert!(g.records().all(|r| (1..=10).contains(&r.action_id)));
        assert!(d.records().all(|r| (1..=10).contains(&r.action_id)));
        for (_, rows) in g.frames() {
            let mut boxes: Vec<BoundingBox> = rows.iter().map(|r| r.bbox).collect();
            boxes.dedup();
            for (i, a) in boxes.iter().enumerate() {
                for b in &boxes[i + 1..] {
                    assert!(iou(a, b) <= MAX_GT_OVERLAP);
                }
            }
        }
    }

    #[test]
    fn hard_negatives_never_match() {
        let spec = ScenarioSpec {
            tp_score_dist: ScoreDist::Constant { value: 0.1 },
            fp_score_dist: ScoreDist::Constant { value: 0.9 },
            decoy_mode: DecoyMode::HardNegative,
            fp_per_frame: IntRange::exactly(4),
            jitter: 0.0,
            ..ScenarioSpec::reference(8)
        };
        let (d, g) = generate(&spec).unwrap();
        let report = mean_average_precision(&d, &g, 0.5).unwrap();
        let tp: usize = report.per_class.iter().map(|c| c.tp).sum();
        assert_eq!(tp, g.len());
        // decoys overlap some actor noticeably
        let decoys: Vec<_> = d.records().filter(|r| r.score == 0.9).collect();
        for r in decoys {
            let gt: Vec<BoundingBox> = g.frame(&r.key).unwrap().iter().map(|x| x.bbox).collect();
            let m = max_iou(&r.bbox, &gt);
            assert!(m > 0.3 && m < 0.5, "{m}");
        }
    }

    #[test]
    fn infeasible_packing_names_the_frame() {
        let spec = ScenarioSpec {
            actors_per_frame: IntRange::exactly(200),
            ..ScenarioSpec::reference(1)
        };
        match generate(&spec).unwrap_err() {
            SynthError::Infeasible { key, .. } => assert_eq!(key, FrameKey::new("vid0000", 902)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = ScenarioSpec::reference(1);
        let cases = [
            ScenarioSpec { n_videos: 0, ..base.clone() },
            ScenarioSpec { jitter: 0.5, ..base.clone() },
            ScenarioSpec { actors_per_frame: IntRange::new(3, 2), ..base.clone() },
            ScenarioSpec { tp_score_dist: ScoreDist::Uniform { lo: 0.5, hi: 1.5 }, ..base.clone() },
            ScenarioSpec { actions_per_actor: IntRange::exactly(4), ..base.clone() },
        ];
        for c in cases {
            assert!(matches!(generate(&c), Err(SynthError::Invalid(_))), "{c:?}");
        }
    }

    #[test]
    fn spec_json_defaults() {
        let json = r#"{"seed":1,"n_videos":1,"frames_per_video":2,"n_classes":2,
            "actors_per_frame":{"min":1,"max":2},
            "tp_score_dist":{"kind":"uniform","lo":0.5,"hi":1.0},
            "fp_score_dist":{"kind":"constant","value":0.2},
            "fp_per_frame":{"min":0,"max":1},"jitter":0.01}"#;
        let spec: ScenarioSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.actions_per_actor, IntRange::exactly(1));
        assert_eq!(spec.decoy_mode, DecoyMode::Easy);
        assert!(generate(&spec).is_ok());
    }
}

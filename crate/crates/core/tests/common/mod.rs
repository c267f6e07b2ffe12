//! Reference implementations used as oracles by the integration tests.
//!
//! Everything here is written directly from the definitions, without reusing
//! the library's grouping, ranking or matching code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use chaoseval::data::{ActionId, BoundingBox, Detection, FrameKey, GroundTruth};
use chaoseval::prune::PruneMode;
use chaoseval::rng;
use rand_chacha::ChaCha8Rng;

pub struct Gen(ChaCha8Rng);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(rng::seeded(seed))
    }
    pub fn unit(&mut self) -> f64 {
        rng::unit(&mut self.0)
    }
    pub fn below(&mut self, n: usize) -> usize {
        rng::below(&mut self.0, n as u64) as usize
    }
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
    pub fn random_box(&mut self) -> BoundingBox {
        let w = 0.05 + 0.4 * self.unit();
        let h = 0.05 + 0.4 * self.unit();
        let x = (1.0 - w) * self.unit();
        let y = (1.0 - h) * self.unit();
        BoundingBox::new(x, y, x + w, y + h).unwrap()
    }
    pub fn jitter(&mut self, b: &BoundingBox, j: f64) -> BoundingBox {
        loop {
            let mut d = || (2.0 * self.unit() - 1.0) * j;
            let c = |v: f64| v.clamp(0.0, 1.0);
            if let Ok(nb) = BoundingBox::new(c(b.x1 + d()), c(b.y1 + d()), c(b.x2 + d()), c(b.y2 + d())) {
                return nb;
            }
        }
    }
}

/// Raw detection rows for pruning tests: up to `max_frames` frames with up to
/// `max_anchors` anchors each, rows interleaved across frames. Scores sit on a
/// coarse grid so ties are common, and boxes repeat within a frame so box-level
/// grouping has work to do.
pub fn random_prune_rows(g: &mut Gen, max_frames: usize, max_anchors: usize) -> Vec<Detection> {
    let n_frames = g.range(1, max_frames);
    let mut keys: Vec<FrameKey> = Vec::new();
    while keys.len() < n_frames {
        let k = FrameKey::new(["a", "b", "c", "d"][g.below(4)], g.below(1000) as u64);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows = Vec::new();
    for key in &keys {
        let n_boxes = g.range(1, max_anchors);
        let boxes: Vec<BoundingBox> = (0..n_boxes).map(|_| g.random_box()).collect();
        let n_rows = g.range(1, max_anchors);
        for _ in 0..n_rows {
            rows.push(Detection {
                key: key.clone(),
                bbox: boxes[g.below(boxes.len())],
                action_id: 1 + g.below(4) as ActionId,
                score: g.below(21) as f64 / 20.0,
            });
        }
    }
    g.shuffle(&mut rows);
    rows
}

/// Sort-and-truncate pruning over raw rows. Output is in store order:
/// frames by key, rows in input order.
pub fn prune_oracle(rows: &[Detection], capacity: usize, mode: PruneMode) -> Vec<Detection> {
    let mut frames: BTreeMap<FrameKey, Vec<&Detection>> = BTreeMap::new();
    for r in rows {
        frames.entry(r.key.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (_, frame) in frames {
        // (anchor score, first row position, member row positions)
        let mut anchors: Vec<(f64, usize, Vec<usize>)> = Vec::new();
        for (i, r) in frame.iter().enumerate() {
            let existing = match mode {
                PruneMode::Row => None,
                PruneMode::Box => anchors.iter().position(|(_, first, _)| {
                    let b = &frame[*first].bbox;
                    b.x1 == r.bbox.x1 && b.y1 == r.bbox.y1 && b.x2 == r.bbox.x2 && b.y2 == r.bbox.y2
                }),
            };
            match existing {
                Some(a) => {
                    anchors[a].0 = anchors[a].0.max(r.score);
                    anchors[a].2.push(i);
                }
                None => anchors.push((r.score, i, vec![i])),
            }
        }
        anchors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        anchors.truncate(capacity);
        let mut keep: Vec<usize> = anchors.into_iter().flat_map(|a| a.2).collect();
        keep.sort_unstable();
        out.extend(keep.into_iter().map(|i| frame[i].clone()));
    }
    out
}

/// Random evaluation instance: detections near ground truth plus clutter.
pub fn random_eval_instance(
    g: &mut Gen,
    max_frames: usize,
    max_dets: usize,
    max_gts: usize,
    max_classes: usize,
) -> (Vec<Detection>, Vec<GroundTruth>) {
    let n_frames = g.range(1, max_frames);
    let n_classes = g.range(1, max_classes);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for f in 0..n_frames {
        let key = FrameKey::new(if f % 2 == 0 { "even" } else { "odd" }, f as u64);
        let n_gt = g.range(0, max_gts);
        let mut frame_gts: Vec<GroundTruth> = Vec::new();
        for _ in 0..n_gt {
            let gt = GroundTruth {
                key: key.clone(),
                bbox: g.random_box(),
                action_id: 1 + g.below(n_classes) as ActionId,
            };
            frame_gts.push(gt);
        }
        let n_det = g.range(0, max_dets);
        for _ in 0..n_det {
            let (bbox, action_id) = if !frame_gts.is_empty() && g.unit() < 0.6 {
                let t = &frame_gts[g.below(frame_gts.len())];
                let a = if g.unit() < 0.8 { t.action_id } else { 1 + g.below(n_classes) as ActionId };
                (g.jitter(&t.bbox, 0.08), a)
            } else {
                (g.random_box(), 1 + g.below(n_classes) as ActionId)
            };
            // a third of the scores land on a coarse grid to force ties
            let score = if g.unit() < 0.33 { g.below(11) as f64 / 10.0 } else { g.unit() };
            dets.push(Detection { key: key.clone(), bbox, action_id, score });
        }
        gts.extend(frame_gts);
    }
    if gts.is_empty() {
        gts.push(GroundTruth {
            key: FrameKey::new("even", 0),
            bbox: g.random_box(),
            action_id: 1,
        });
    }
    g.shuffle(&mut dets);
    g.shuffle(&mut gts);
    (dets, gts)
}

fn ref_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: &BoundingBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// Order-preserving sort by frame key; returns original indices.
fn store_order<T>(rows: &[T], key: impl Fn(&T) -> &FrameKey) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ka, kb) = (key(&rows[a]), key(&rows[b]));
        (ka.video_id.as_str(), ka.timestamp).cmp(&(kb.video_id.as_str(), kb.timestamp))
    });
    idx
}

pub struct RefReport {
    pub map: f64,
    pub per_class: BTreeMap<ActionId, f64>,
    /// TP flags in rank order, per class.
    pub flags: BTreeMap<ActionId, Vec<bool>>,
}

/// Brute-force evaluator: explicit IoU tables, greedy rank-order matching,
/// AP as the positive-normalized sum of precision at true-positive ranks.
pub fn reference_eval(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> RefReport {
    let det_order = store_order(dets, |d| &d.key);
    let gt_order = store_order(gts, |g| &g.key);
    let mut classes: Vec<ActionId> = gts.iter().map(|g| g.action_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = BTreeMap::new();
    let mut flags_by_class = BTreeMap::new();
    for &c in &classes {
        // (score, tie, det index)
        let mut ranked: Vec<(f64, usize, usize)> = det_order
            .iter()
            .enumerate()
            .filter(|(_, &i)| dets[i].action_id == c)
            .map(|(tie, &i)| (dets[i].score, tie, i))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let class_gts: Vec<usize> = gt_order.iter().copied().filter(|&i| gts[i].action_id == c).collect();
        let m = class_gts.len();

        let table: Vec<Vec<f64>> = ranked
            .iter()
            .map(|&(_, _, di)| {
                class_gts
                    .iter()
                    .map(|&gi| {
                        if dets[di].key == gts[gi].key {
                            ref_iou(&dets[di].bbox, &gts[gi].bbox)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();

        let mut used = vec![false; m];
        let mut flags = Vec::new();
        for row in &table {
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if used[j] || v < thr {
                    continue;
                }
                if best.is_none() || v > row[best.unwrap()] {
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
            }
            flags.push(best.is_some());
        }

        let mut hits = 0.0;
        let mut total = 0.0;
        for (k, &tp) in flags.iter().enumerate() {
            if tp {
                hits += 1.0;
                total += hits / (k as f64 + 1.0);
            }
        }
        per_class.insert(c, total / m as f64);
        flags_by_class.insert(c, flags);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    RefReport { map, per_class, flags: flags_by_class }
}

/// Serial capacity sweep built from the oracles above. Returns
/// `(capacity, map)` pairs and the smallest argmax.
pub fn reference_sweep(
    dets: &[Detection],
    gts: &[GroundTruth],
    capacities: impl IntoIterator<Item = usize>,
    mode: PruneMode,
    thr: f64,
) -> (Vec<(usize, f64)>, usize) {
    let curve: Vec<(usize, f64)> = capacities
        .into_iter()
        .map(|c| (c, reference_eval(&prune_oracle(dets, c, mode), gts, thr).map))
        .collect();
    let mut best = curve[0];
    for &p in &curve {
        if p.1 > best.1 {
            best = p;
        }
    }
    (curve, best.0)
}

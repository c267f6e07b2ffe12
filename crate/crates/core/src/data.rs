//! Domain records and AVA-style CSV loading.
//!
//! Rows are `video_id,timestamp,x1,y1,x2,y2,action_id[,score]` with no header.
//! Loaded stores group records by [`FrameKey`] in ascending key order; within a
//! frame, records keep their input row order. That order is the deterministic
//! tie-break used by pruning and ranking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ActionId = u32;

/// Axis-aligned box in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("{0} out of [0,1] (got {1})")]
    OutOfRange(&'static str, f64),
    #[error("x1 < x2 violated (x1={0}, x2={1})")]
    EmptyWidth(f64, f64),
    #[error("y1 < y2 violated (y1={0}, y2={1})")]
    EmptyHeight(f64, f64),
}

impl BoxError {
    fn field(&self) -> &'static str {
        match self {
            BoxError::OutOfRange(f, _) => f,
            BoxError::EmptyWidth(..) => "x1",
            BoxError::EmptyHeight(..) => "y1",
        }
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        for (name, v) in [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BoxError::OutOfRange(name, v));
            }
        }
        if x1 >= x2 {
            return Err(BoxError::EmptyWidth(x1, x2));
        }
        if y1 >= y2 {
            return Err(BoxError::EmptyHeight(y1, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Bit pattern of the four coordinates; exact-equality grouping key.
    pub fn bits(&self) -> [u64; 4] {
        [
            self.x1.to_bits(),
            self.y1.to_bits(),
            self.x2.to_bits(),
            self.y2.to_bits(),
        ]
    }
}

/// A `{video, timestamp}` pair. Pruning heaps are scoped to one key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video_id: String,
    pub timestamp: u64,
}

impl FrameKey {
    pub fn new(video_id: impl Into<String>, timestamp: u64) -> Self {
        let video_id = video_id.into();
        assert!(!video_id.is_empty(), "video_id must be non-empty");
        Self {
            video_id,
            timestamp,
        }
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.video_id, self.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub key: FrameKey,
    pub bbox: BoundingBox,
    pub action_id: ActionId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub key: FrameKey,
    pub bbox: BoundingBox,
    pub action_id: ActionId,
}

/// Common accessors for records held in a [`Store`].
pub trait Record: Clone {
    fn key(&self) -> &FrameKey;
    fn action_id(&self) -> ActionId;
    fn bbox(&self) -> &BoundingBox;
}

impl Record for Detection {
    fn key(&self) -> &FrameKey {
        &self.key
    }
    fn action_id(&self) -> ActionId {
        self.action_id
    }
    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }
}

impl Record for GroundTruth {
    fn key(&self) -> &FrameKey {
        &self.key
    }
    fn action_id(&self) -> ActionId {
        self.action_id
    }
    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }
}

/// Immutable collection of records grouped by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Store<R> {
    frames: BTreeMap<FrameKey, Vec<R>>,
    classes: BTreeSet<ActionId>,
    len: usize,
}

pub type DetectionStore = Store<Detection>;
pub type GroundTruthStore = Store<GroundTruth>;

impl<R: Record> Store<R> {
    /// Groups records by frame, keeping input order within each frame.
    pub fn from_records(records: impl IntoIterator<Item = R>) -> Self {
        let mut frames: BTreeMap<FrameKey, Vec<R>> = BTreeMap::new();
        let mut classes = BTreeSet::new();
        let mut len = 0;
        for r in records {
            classes.insert(r.action_id());
            frames.entry(r.key().clone()).or_default().push(r);
            len += 1;
        }
        Self {
            frames,
            classes,
            len,
        }
    }

    pub(crate) fn from_frames(frames: BTreeMap<FrameKey, Vec<R>>) -> Self {
        let frames: BTreeMap<_, _> = frames.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        let classes = frames
            .values()
            .flat_map(|rows| rows.iter().map(Record::action_id))
            .collect();
        let len = frames.values().map(Vec::len).sum();
        Self {
            frames,
            classes,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sorted set of action ids present in the store.
    pub fn class_set(&self) -> &BTreeSet<ActionId> {
        &self.classes
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> impl Iterator<Item = (&FrameKey, &[R])> {
        self.frames.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn frame(&self, key: &FrameKey) -> Option<&[R]> {
        self.frames.get(key).map(Vec::as_slice)
    }

    /// All records in deterministic store order.
    pub fn records(&self) -> impl Iterator<Item = &R> {
        self.frames.values().flatten()
    }

    /// Count of records per action id.
    pub fn class_counts(&self) -> BTreeMap<ActionId, usize> {
        let mut counts = BTreeMap::new();
        for r in self.records() {
            *counts.entry(r.action_id()).or_insert(0) += 1;
        }
        counts
    }

    /// Rebuilds the store with every record transformed, preserving order.
    pub fn map_records(&self, f: impl FnMut(&R) -> R) -> Self {
        Self::from_records(self.records().map(f))
    }
}

impl DetectionStore {
    /// Largest number of rows in any single frame.
    pub fn max_rows_per_frame(&self) -> usize {
        self.frames.values().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: malformed CSV: {message}")]
    Csv { line: u64, message: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: u64,
        expected: &'static str,
        found: usize,
    },
    #[error("line {line}, field {field}: {message}")]
    Field {
        line: u64,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate ground-truth row (same frame, box and action as line {first})")]
    Duplicate { line: u64, first: u64 },
}

impl LoadError {
    pub fn line(&self) -> Option<u64> {
        match self {
            LoadError::Io { .. } => None,
            LoadError::Csv { line, .. }
            | LoadError::ColumnCount { line, .. }
            | LoadError::Field { line, .. }
            | LoadError::Duplicate { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Clamp out-of-range coordinates into [0,1] with a warning instead of failing.
    pub lenient: bool,
    /// Accept and ignore columns after `action_id` in ground-truth files.
    pub ignore_gt_score: bool,
}

struct RawRow {
    line: u64,
    key: FrameKey,
    bbox: BoundingBox,
    action_id: ActionId,
    score: Option<f64>,
}

fn read_rows<R: Read>(
    reader: R,
    min_cols: usize,
    max_cols: Option<usize>,
    expected: &'static str,
    score_col: Option<usize>,
    opts: LoadOptions,
) -> Result<Vec<RawRow>, LoadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| LoadError::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let found = rec.len();
        if found < min_cols || max_cols.is_some_and(|m| found > m) {
            return Err(LoadError::ColumnCount {
                line,
                expected,
                found,
            });
        }
        let field_err = |field: &'static str, message: String| LoadError::Field {
            line,
            field,
            message,
        };

        let video_id = &rec[0];
        if video_id.is_empty() {
            return Err(field_err("video_id", "must be non-empty".into()));
        }
        let timestamp: u64 = rec[1].parse().map_err(|_| {
            field_err(
                "timestamp",
                format!("expected a non-negative integer, got {:?}", &rec[1]),
            )
        })?;

        let mut coords = [0.0f64; 4];
        for (i, name) in ["x1", "y1", "x2", "y2"].into_iter().enumerate() {
            let raw = &rec[2 + i];
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| field_err(name, format!("expected a number, got {raw:?}")))?;
            coords[i] = if (0.0..=1.0).contains(&v) {
                v
            } else if opts.lenient {
                let c = v.clamp(0.0, 1.0);
                log::warn!("line {line}: {name}={v} clamped to {c}");
                c
            } else {
                return Err(field_err(name, format!("{name} out of [0,1] (got {v})")));
            };
        }
        let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| field_err(e.field(), e.to_string()))?;

        let action_id: ActionId = rec[6]
            .parse()
            .ok()
            .filter(|&a: &ActionId| a >= 1)
            .ok_or_else(|| {
                field_err(
                    "action_id",
                    format!("expected a positive integer, got {:?}", &rec[6]),
                )
            })?;

        let score = match score_col {
            Some(i) => {
                let raw = &rec[i];
                let s: f64 = raw
                    .parse()
                    .map_err(|_| field_err("score", format!("expected a number, got {raw:?}")))?;
                if !(0.0..=1.0).contains(&s) {
                    return Err(field_err("score", format!("score out of [0,1] (got {s})")));
                }
                Some(s)
            }
            None => None,
        };

        rows.push(RawRow {
            line,
            key: FrameKey {
                video_id: video_id.to_string(),
                timestamp,
            },
            bbox,
            action_id,
            score,
        });
    }
    Ok(rows)
}

fn open(path: &Path) -> Result<File, LoadError> {
    File::open(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses detection rows (at least 8 columns; extra trailing columns are ignored).
pub fn read_detections<R: Read>(reader: R, opts: LoadOptions) -> Result<DetectionStore, LoadError> {
    let rows = read_rows(reader, 8, None, "at least 8", Some(7), opts)?;
    Ok(Store::from_records(rows.into_iter().map(|r| Detection {
        key: r.key,
        bbox: r.bbox,
        action_id: r.action_id,
        score: r.score.expect("score column parsed"),
    })))
}

pub fn load_detections(path: impl AsRef<Path>, opts: LoadOptions) -> Result<DetectionStore, LoadError> {
    read_detections(open(path.as_ref())?, opts)
}

/// Parses ground-truth rows. Exactly 7 columns unless `ignore_gt_score` is set,
/// in which case trailing columns are accepted and dropped.
pub fn read_ground_truth<R: Read>(
    reader: R,
    opts: LoadOptions,
) -> Result<GroundTruthStore, LoadError> {
    let (max, expected) = if opts.ignore_gt_score {
        (None, "at least 7")
    } else {
        (Some(7), "exactly 7 (pass the ignore-score option to accept extra columns)")
    };
    let rows = read_rows(reader, 7, max, expected, None, opts)?;
    let mut seen: HashMap<(FrameKey, [u64; 4], ActionId), u64> = HashMap::new();
    for r in &rows {
        if let Some(&first) = seen.get(&(r.key.clone(), r.bbox.bits(), r.action_id)) {
            return Err(LoadError::Duplicate {
                line: r.line,
                first,
            });
        }
        seen.insert((r.key.clone(), r.bbox.bits(), r.action_id), r.line);
    }
    Ok(Store::from_records(rows.into_iter().map(|r| GroundTruth {
        key: r.key,
        bbox: r.bbox,
        action_id: r.action_id,
    })))
}

pub fn load_ground_truth(
    path: impl AsRef<Path>,
    opts: LoadOptions,
) -> Result<GroundTruthStore, LoadError> {
    read_ground_truth(open(path.as_ref())?, opts)
}

// Shortest representation that parses back to the same f64; inputs written with
// six decimals therefore come back out with at most six.
fn write_prefix<W: Write>(w: &mut W, key: &FrameKey, b: &BoundingBox, action: ActionId) -> io::Result<()> {
    write!(
        w,
        "{},{},{},{},{},{},{}",
        key.video_id, key.timestamp, b.x1, b.y1, b.x2, b.y2, action
    )
}

pub fn write_detections<W: Write>(store: &DetectionStore, mut w: W) -> io::Result<()> {
    for d in store.records() {
        write_prefix(&mut w, &d.key, &d.bbox, d.action_id)?;
        writeln!(w, ",{}", d.score)?;
    }
    w.flush()
}

pub fn write_ground_truth<W: Write>(store: &GroundTruthStore, mut w: W) -> io::Result<()> {
    for g in store.records() {
        write_prefix(&mut w, &g.key, &g.bbox, g.action_id)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn detections_to_csv(store: &DetectionStore) -> String {
    let mut buf = Vec::new();
    write_detections(store, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn ground_truth_to_csv(store: &GroundTruthStore) -> String {
    let mut buf = Vec::new();
    write_ground_truth(store, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

//! Toy-scale dual-stream feature fusion.
//!
//! A ViT stream is resampled to the Slow pathway's spatial grid by a fixed 3D
//! convolution, every stream is averaged over time, and the three resulting
//! `C x H x W` maps are concatenated along channels in `[vit, slow, fast]`
//! order. Actor features are then read out of the fused map under each anchor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BoundingBox;
use crate::rng::{seeded, unit};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("data length {len} does not match {c}x{t}x{h}x{w} = {expected}")]
    Shape {
        c: usize,
        t: usize,
        h: usize,
        w: usize,
        len: usize,
        expected: usize,
    },
    #[error("dimensions must be positive (got {0})")]
    ZeroDim(String),
    #[error("{axis}: ({size} + 2*{pad} - {kernel}) / {stride} + 1 = {got}, but the target is {want}")]
    Incompatible {
        axis: &'static str,
        size: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
        got: i64,
        want: usize,
    },
    #[error("spatial dims differ: vit {vit:?}, slow {slow:?}, fast {fast:?}")]
    SpatialMismatch {
        vit: (usize, usize),
        slow: (usize, usize),
        fast: (usize, usize),
    },
    #[error("non-finite feature value at flat index {0}")]
    NonFinite(usize),
}

/// Dense `C x T x H x W` feature volume, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(c: usize, t: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, FusionError> {
        if c == 0 || t == 0 || h == 0 || w == 0 {
            return Err(FusionError::ZeroDim(format!("{c}x{t}x{h}x{w}")));
        }
        let expected = c * t * h * w;
        if data.len() != expected {
            return Err(FusionError::Shape { c, t, h, w, len: data.len(), expected });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(i));
        }
        Ok(Self { c, t, h, w, data })
    }

    pub fn filled(c: usize, t: usize, h: usize, w: usize, value: f64) -> Result<Self, FusionError> {
        Self::new(c, t, h, w, vec![value; c * t * h * w])
    }

    /// Uniform values in `[-1, 1)` from a seeded ChaCha8 stream.
    pub fn random(c: usize, t: usize, h: usize, w: usize, seed: u64) -> Result<Self, FusionError> {
        let mut rng = seeded(seed);
        let data = (0..c * t * h * w).map(|_| 2.0 * unit(&mut rng) - 1.0).collect();
        Self::new(c, t, h, w, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.t, self.h, self.w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.t + t) * self.h + y) * self.w + x
    }

    pub fn get(&self, c: usize, t: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, t, y, x)]
    }

    /// `alpha * self + beta * other`, elementwise.
    pub fn axpby(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        assert_eq!(self.dims(), other.dims());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Self { data, ..*self }
    }

    pub fn with_value(&self, flat: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[flat] = value;
        out
    }
}

/// Dense `C x H x W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl FusedMap {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, FusionError> {
        if c == 0 || h == 0 || w == 0 {
            return Err(FusionError::ZeroDim(format!("{c}x{h}x{w}")));
        }
        let expected = c * h * w;
        if data.len() != expected {
            return Err(FusionError::Shape { c, t: 1, h, w, len: data.len(), expected });
        }
        Ok(Self { c, h, w, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Channel vector at spatial position `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.get(c, y, x)).collect()
    }

    /// Mean over the spatial grid, per channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.h * self.w) as f64;
        self.data.chunks(self.h * self.w).map(|ch| ch.iter().sum::<f64>() / n).collect()
    }
}

/// Mean over the time axis.
pub fn temporal_average_pool(v: &FeatureVolume) -> FusedMap {
    let plane = v.h * v.w;
    let mut out = vec![0.0; v.c * plane];
    for c in 0..v.c {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for t in 0..v.t {
            let start = v.index(c, t, 0, 0);
            for (o, x) in dst.iter_mut().zip(&v.data[start..start + plane]) {
                *o += x;
            }
        }
        let inv = v.t as f64;
        dst.iter_mut().for_each(|o| *o /= inv);
    }
    FusedMap { c: v.c, h: v.h, w: v.w, data: out }
}

/// Fixed depthwise 3D convolution (cross-correlation, zero padding) mapping a
/// volume onto a target spatial grid. The same kernel is applied to every
/// channel, so the channel count is unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMatcher {
    /// Kernel extent `(kt, kh, kw)`.
    pub kernel: (usize, usize, usize),
    /// Row-major `kt x kh x kw` weights.
    pub weights: Vec<f64>,
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    /// Required output `(H, W)`.
    pub target: (usize, usize),
}

impl SpatialMatcher {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            kernel: (1, 1, 1),
            weights: vec![1.0],
            stride: (1, 1, 1),
            padding: (0, 0, 0),
            target: (h, w),
        }
    }

    /// Box filter whose weights sum to one.
    pub fn averaging(
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        target: (usize, usize),
    ) -> Self {
        let n = kernel.0 * kernel.1 * kernel.2;
        Self {
            kernel,
            weights: vec![1.0 / n as f64; n],
            stride,
            padding: (0, 0, 0),
            target,
        }
    }

    /// Seeded positive weights normalized to sum to one.
    pub fn seeded(
        seed: u64,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
        target: (usize, usize),
    ) -> Self {
        let mut rng = seeded(seed);
        let n = kernel.0 * kernel.1 * kernel.2;
        let raw: Vec<f64> = (0..n).map(|_| 0.5 + unit(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            kernel,
            weights: raw.into_iter().map(|w| w / total).collect(),
            stride,
            padding,
            target,
        }
    }

    pub fn weight(&self, dt: usize, dy: usize, dx: usize) -> f64 {
        self.weights[(dt * self.kernel.1 + dy) * self.kernel.2 + dx]
    }

    fn out_len(size: usize, pad: usize, kernel: usize, stride: usize) -> i64 {
        (size as i64 + 2 * pad as i64 - kernel as i64).div_euclid(stride as i64) + 1
    }

    /// Output `(T', H', W')` for an input volume, checked against the target.
    pub fn output_dims(&self, v: &FeatureVolume) -> Result<(usize, usize, usize), FusionError> {
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.padding;
        if kt * kh * kw == 0 || st * sh * sw == 0 || self.weights.len() != kt * kh * kw {
            return Err(FusionError::ZeroDim(format!(
                "kernel {:?} stride {:?} with {} weights",
                self.kernel,
                self.stride,
                self.weights.len()
            )));
        }
        let t = Self::out_len(v.t, pt, kt, st);
        if t < 1 {
            return Err(FusionError::Incompatible {
                axis: "T", size: v.t, pad: pt, kernel: kt, stride: st, got: t, want: 1,
            });
        }
        let checks = [
            ("H", v.h, ph, kh, sh, self.target.0),
            ("W", v.w, pw, kw, sw, self.target.1),
        ];
        let mut out = [0usize; 2];
        for (i, (axis, size, pad, kernel, stride, want)) in checks.into_iter().enumerate() {
            let got = Self::out_len(size, pad, kernel, stride);
            if got != want as i64 {
                return Err(FusionError::Incompatible { axis, size, pad, kernel, stride, got, want });
            }
            out[i] = want;
        }
        Ok((t as usize, out[0], out[1]))
    }
}

/// Applies the matcher to every channel of `v`.
pub fn spatial_match(v: &FeatureVolume, m: &SpatialMatcher) -> Result<FeatureVolume, FusionError> {
    let (to, ho, wo) = m.output_dims(v)?;
    let (kt, kh, kw) = m.kernel;
    let (st, sh, sw) = m.stride;
    let (pt, ph, pw) = m.padding;
    let mut data = Vec::with_capacity(v.c * to * ho * wo);
    for c in 0..v.c {
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dt in 0..kt {
                        let Some(t) = (ot * st + dt).checked_sub(pt).filter(|&t| t < v.t) else {
                            continue;
                        };
                        for dy in 0..kh {
                            let Some(y) = (oy * sh + dy).checked_sub(ph).filter(|&y| y < v.h) else {
                                continue;
                            };
                            for dx in 0..kw {
                                let Some(x) = (ox * sw + dx).checked_sub(pw).filter(|&x| x < v.w) else {
                                    continue;
                                };
                                acc += m.weight(dt, dy, dx) * v.get(c, t, y, x);
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    FeatureVolume::new(v.c, to, ho, wo, data)
}

/// Channel concatenation in `[vit, slow, fast]` order.
pub fn fuse(vit: &FusedMap, slow: &FusedMap, fast: &FusedMap) -> Result<FusedMap, FusionError> {
    let dims = |m: &FusedMap| (m.h, m.w);
    if dims(vit) != dims(slow) || dims(fast) != dims(slow) {
        return Err(FusionError::SpatialMismatch {
            vit: dims(vit),
            slow: dims(slow),
            fast: dims(fast),
        });
    }
    let mut data = Vec::with_capacity(vit.data.len() + slow.data.len() + fast.data.len());
    data.extend_from_slice(&vit.data);
    data.extend_from_slice(&slow.data);
    data.extend_from_slice(&fast.data);
    FusedMap::new(vit.c + slow.c + fast.c, slow.h, slow.w, data)
}

/// Grid cells of an `h x w` map whose centres fall inside `b` (closed
/// interval). Falls back to the cell containing the box centre.
pub fn cells_in_box(b: &BoundingBox, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for y in 0..h {
        let cy = (y as f64 + 0.5) / h as f64;
        if cy < b.y1 || cy > b.y2 {
            continue;
        }
        for x in 0..w {
            let cx = (x as f64 + 0.5) / w as f64;
            if cx >= b.x1 && cx <= b.x2 {
                cells.push((y, x));
            }
        }
    }
    if cells.is_empty() {
        let (cx, cy) = b.center();
        let x = ((cx * w as f64) as usize).min(w - 1);
        let y = ((cy * h as f64) as usize).min(h - 1);
        cells.push((y, x));
    }
    cells
}

/// One `C`-vector per anchor: the mean of the map over the anchor's cells.
pub fn roi_actor_pool(map: &FusedMap, anchors: &[BoundingBox]) -> Vec<Vec<f64>> {
    anchors
        .iter()
        .map(|b| {
            let cells = cells_in_box(b, map.h, map.w);
            let n = cells.len() as f64;
            (0..map.c)
                .map(|c| cells.iter().map(|&(y, x)| map.get(c, y, x)).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Shape of one stream as `C x T x H x W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl StreamDims {
    fn parse(s: &str) -> Option<Self> {
        let v: Vec<usize> = s.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match v[..] {
            [c, t, h, w] if c * t * h * w > 0 => Some(Self { c, t, h, w }),
            _ => None,
        }
    }
}

/// Stand-in dims for the three streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub vit: StreamDims,
    pub slow: StreamDims,
    pub fast: StreamDims,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            vit: StreamDims { c: 6, t: 8, h: 8, w: 8 },
            slow: StreamDims { c: 8, t: 4, h: 4, w: 4 },
            fast: StreamDims { c: 2, t: 16, h: 4, w: 4 },
        }
    }
}

impl std::str::FromStr for ToyDims {
    type Err = String;

    /// `vit=CxTxHxW,slow=CxTxHxW,fast=CxTxHxW`; omitted streams keep defaults.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut dims = ToyDims::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected name=CxTxHxW, got {part:?}"))?;
            let d = StreamDims::parse(value)
                .ok_or_else(|| format!("bad dims {value:?} for {name} (expected CxTxHxW)"))?;
            match name.trim() {
                "vit" => dims.vit = d,
                "slow" => dims.slow = d,
                "fast" => dims.fast = d,
                other => return Err(format!("unknown stream {other:?} (expected vit, slow or fast)")),
            }
        }
        Ok(dims)
    }
}

/// Output of the toy pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStreamOutput {
    pub fused: FusedMap,
    /// `[start, end)` channel ranges of the vit, slow and fast blocks.
    pub blocks: [(usize, usize); 3],
    pub matcher: SpatialMatcher,
}

/// Builds seeded stand-in volumes for all streams and runs
/// conv-align -> temporal pooling -> concatenation.
///
/// The ViT grid must be an integer multiple of the Slow grid; the matcher is a
/// non-overlapping seeded kernel with stride equal to that ratio.
pub fn dual_stream_demo(seed: u64, dims: ToyDims) -> Result<DualStreamOutput, FusionError> {
    let ToyDims { vit, slow, fast } = dims;
    if (fast.h, fast.w) != (slow.h, slow.w) {
        return Err(FusionError::SpatialMismatch {
            vit: (vit.h, vit.w),
            slow: (slow.h, slow.w),
            fast: (fast.h, fast.w),
        });
    }
    let (kh, kw) = (vit.h / slow.h, vit.w / slow.w);
    let (kh, kw) = (kh.max(1), kw.max(1));
    let matcher = SpatialMatcher::seeded(seed ^ 0x5eed, (1, kh, kw), (1, kh, kw), (0, 0, 0), (slow.h, slow.w));

    let vol = |d: StreamDims, s: u64| FeatureVolume::random(d.c, d.t, d.h, d.w, s);
    let v = vol(vit, seed)?;
    let s = vol(slow, seed.wrapping_add(1))?;
    let f = vol(fast, seed.wrapping_add(2))?;

    let v_map = temporal_average_pool(&spatial_match(&v, &matcher)?);
    let fused = fuse(&v_map, &temporal_average_pool(&s), &temporal_average_pool(&f))?;
    let a = v_map.c;
    let b = a + slow.c;
    Ok(DualStreamOutput {
        blocks: [(0, a), (a, b), (b, b + fast.c)],
        fused,
        matcher,
    })
}

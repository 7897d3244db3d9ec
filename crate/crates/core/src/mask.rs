//! Run-length-encoded binary masks and the set algebra built on them.
//!
//! Runs follow row-major pixel order and alternate background/foreground,
//! starting with a (possibly empty) background run. A 2×2 mask with only
//! pixel (0, 1) set is stored as `[1, 1, 2]`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {height}x{width}")]
    Dimension { height: u32, width: u32 },
    #[error("raster has {actual} pixels, expected {expected}")]
    RasterLength { expected: usize, actual: usize },
    #[error("corrupt mask: runs sum to {actual}, expected {expected}")]
    Corrupt { expected: u64, actual: u64 },
    #[error("dimension mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    Mismatch { a_h: u32, a_w: u32, b_h: u32, b_w: u32 },
    #[error("operation requires a nonempty mask")]
    Empty,
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("masks overlap on {0} pixels")]
    Overlap(u64),
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box {
    pub row_min: u32,
    pub col_min: u32,
    pub row_max: u32,
    pub col_max: u32,
}

impl Box {
    pub fn intersects(&self, other: &Box) -> bool {
        self.row_min <= other.row_max
            && other.row_min <= self.row_max
            && self.col_min <= other.col_max
            && other.col_min <= self.col_max
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        row >= self.row_min && row <= self.row_max && col >= self.col_min && col <= self.col_max
    }

    pub fn height(&self) -> u32 {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> u32 {
        self.col_max - self.col_min + 1
    }
}

/// Accumulates (value, length) pieces into canonical runs.
struct RunBuilder {
    runs: Vec<u32>,
    current: bool,
    len: u64,
}

impl RunBuilder {
    fn new() -> Self {
        Self { runs: Vec::new(), current: false, len: 0 }
    }

    fn push(&mut self, value: bool, len: u64) {
        if len == 0 {
            return;
        }
        if value != self.current {
            self.runs.push(self.len as u32);
            self.current = value;
            self.len = 0;
        }
        self.len += len;
    }

    fn finish(mut self) -> Vec<u32> {
        self.runs.push(self.len as u32);
        // a trailing empty foreground run can only appear for an empty builder
        if self.runs.len() > 1 && *self.runs.last().unwrap() == 0 {
            self.runs.pop();
        }
        self.runs
    }
}

/// Binary raster stored as row-major run lengths with cached area and bbox.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
    area: u64,
    bbox: Option<Box>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("size", &(self.height, self.width))
            .field("area", &self.area)
            .field("bbox", &self.bbox)
            .field("runs", &self.runs.len())
            .finish()
    }
}

fn check_dims(height: u32, width: u32) -> Result<(), MaskError> {
    if height == 0 || width == 0 {
        Err(MaskError::Dimension { height, width })
    } else {
        Ok(())
    }
}

impl BinaryMask {
    /// An all-background mask.
    pub fn empty(height: u32, width: u32) -> Result<Self, MaskError> {
        check_dims(height, width)?;
        Ok(Self::from_canonical(height, width, vec![height * width]))
    }

    /// An all-foreground mask.
    pub fn full(height: u32, width: u32) -> Result<Self, MaskError> {
        check_dims(height, width)?;
        Ok(Self::from_canonical(height, width, vec![0, height * width]))
    }

    /// Encode a row-major boolean raster.
    pub fn encode(height: u32, width: u32, raster: &[bool]) -> Result<Self, MaskError> {
        check_dims(height, width)?;
        let expected = height as usize * width as usize;
        if raster.len() != expected {
            return Err(MaskError::RasterLength { expected, actual: raster.len() });
        }
        let mut builder = RunBuilder::new();
        for &v in raster {
            builder.push(v, 1);
        }
        Ok(Self::from_canonical(height, width, builder.finish()))
    }

    pub fn from_fn(
        height: u32,
        width: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, MaskError> {
        check_dims(height, width)?;
        let mut builder = RunBuilder::new();
        for r in 0..height {
            for c in 0..width {
                builder.push(f(r, c), 1);
            }
        }
        Ok(Self::from_canonical(height, width, builder.finish()))
    }

    /// Build from run lengths. Zero-length interior runs are folded away so
    /// the stored encoding is always canonical.
    pub fn from_runs(height: u32, width: u32, runs: &[u32]) -> Result<Self, MaskError> {
        check_dims(height, width)?;
        let expected = height as u64 * width as u64;
        let actual: u64 = runs.iter().map(|&r| r as u64).sum();
        if actual != expected {
            return Err(MaskError::Corrupt { expected, actual });
        }
        let mut builder = RunBuilder::new();
        for (i, &r) in runs.iter().enumerate() {
            builder.push(i % 2 == 1, r as u64);
        }
        Ok(Self::from_canonical(height, width, builder.finish()))
    }

    /// Build from sorted, non-overlapping foreground spans `[start, end)` over
    /// flat row-major indices.
    pub(crate) fn from_spans(
        height: u32,
        width: u32,
        spans: impl IntoIterator<Item = (u64, u64)>,
    ) -> Self {
        let total = height as u64 * width as u64;
        let mut builder = RunBuilder::new();
        let mut pos = 0u64;
        for (s, e) in spans {
            debug_assert!(s >= pos && e >= s && e <= total);
            builder.push(false, s - pos);
            builder.push(true, e - s);
            pos = e;
        }
        builder.push(false, total - pos);
        Self::from_canonical(height, width, builder.finish())
    }

    fn from_canonical(height: u32, width: u32, runs: Vec<u32>) -> Self {
        let mut mask = Self { height, width, runs, area: 0, bbox: None };
        let mut area = 0u64;
        let mut row_min = u32::MAX;
        let mut row_max = 0u32;
        let mut col_min = u32::MAX;
        let mut col_max = 0u32;
        let w = width as u64;
        for (s, e) in mask.spans() {
            area += e - s;
            let r0 = (s / w) as u32;
            let r1 = ((e - 1) / w) as u32;
            row_min = row_min.min(r0);
            row_max = row_max.max(r1);
            if r0 == r1 {
                col_min = col_min.min((s % w) as u32);
                col_max = col_max.max(((e - 1) % w) as u32);
            } else {
                col_min = 0;
                col_max = width - 1;
            }
        }
        mask.area = area;
        if area > 0 {
            mask.bbox = Some(Box { row_min, col_min, row_max, col_max });
        }
        mask
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn bbox(&self) -> Option<Box> {
        self.bbox
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_same(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(MaskError::Mismatch {
                a_h: self.height,
                a_w: self.width,
                b_h: other.height,
                b_w: other.width,
            })
        }
    }

    /// Foreground spans `[start, end)` in flat row-major indices.
    pub fn spans(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    /// Foreground spans split at row boundaries: `(row, col_start, col_end)`
    /// with `col_end` exclusive.
    pub fn row_segments(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        let w = self.width as u64;
        self.spans().flat_map(move |(s, e)| {
            let r0 = s / w;
            let r1 = (e - 1) / w;
            (r0..=r1).map(move |r| {
                let row_start = r * w;
                let c0 = s.max(row_start) - row_start;
                let c1 = e.min(row_start + w) - row_start;
                (r as u32, c0 as u32, c1 as u32)
            })
        })
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = vec![false; self.height as usize * self.width as usize];
        for (s, e) in self.spans() {
            out[s as usize..e as usize].fill(true);
        }
        out
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        if row >= self.height || col >= self.width {
            return false;
        }
        match self.bbox {
            Some(b) if b.contains(row, col) => {}
            _ => return false,
        }
        let idx = row as u64 * self.width as u64 + col as u64;
        for (s, e) in self.spans() {
            if idx < s {
                return false;
            }
            if idx < e {
                return true;
            }
        }
        false
    }

    fn boxes_disjoint(&self, other: &BinaryMask) -> bool {
        match (self.bbox, other.bbox) {
            (Some(a), Some(b)) => !a.intersects(&b),
            _ => true,
        }
    }

    /// Number of pixels set in both masks.
    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64, MaskError> {
        self.check_same(other)?;
        if self.boxes_disjoint(other) {
            return Ok(0);
        }
        let mut total = 0u64;
        let mut a = self.spans().peekable();
        let mut b = other.spans().peekable();
        while let (Some(&(s1, e1)), Some(&(s2, e2))) = (a.peek(), b.peek()) {
            let lo = s1.max(s2);
            let hi = e1.min(e2);
            if hi > lo {
                total += hi - lo;
            }
            if e1 <= e2 {
                a.next();
            } else {
                b.next();
            }
        }
        Ok(total)
    }

    /// Intersection over union; two empty masks score 0.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.area + other.area - inter;
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    fn combine(&self, other: &BinaryMask, op: impl Fn(bool, bool) -> bool) -> BinaryMask {
        let mut builder = RunBuilder::new();
        let mut ia = 0usize;
        let mut ib = 0usize;
        let mut rem_a = self.runs[0] as u64;
        let mut rem_b = other.runs[0] as u64;
        loop {
            while rem_a == 0 && ia + 1 < self.runs.len() {
                ia += 1;
                rem_a = self.runs[ia] as u64;
            }
            while rem_b == 0 && ib + 1 < other.runs.len() {
                ib += 1;
                rem_b = other.runs[ib] as u64;
            }
            if rem_a == 0 || rem_b == 0 {
                break;
            }
            let step = rem_a.min(rem_b);
            builder.push(op(ia % 2 == 1, ib % 2 == 1), step);
            rem_a -= step;
            rem_b -= step;
        }
        BinaryMask::from_canonical(self.height, self.width, builder.finish())
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_same(other)?;
        if self.boxes_disjoint(other) {
            return BinaryMask::empty(self.height, self.width);
        }
        Ok(self.combine(other, |a, b| a && b))
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_same(other)?;
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        Ok(self.combine(other, |a, b| a || b))
    }

    /// Pixels of `self` not in `other`.
    pub fn subtract(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_same(other)?;
        if self.boxes_disjoint(other) {
            return Ok(self.clone());
        }
        Ok(self.combine(other, |a, b| a && !b))
    }

    pub fn complement(&self) -> BinaryMask {
        let mut builder = RunBuilder::new();
        for (i, &r) in self.runs.iter().enumerate() {
            builder.push(i % 2 == 0, r as u64);
        }
        BinaryMask::from_canonical(self.height, self.width, builder.finish())
    }

    /// Mean (row, col) of foreground pixels.
    pub fn centroid(&self) -> Result<(f64, f64), MaskError> {
        if self.area == 0 {
            return Err(MaskError::Empty);
        }
        let mut row_sum = 0f64;
        let mut col_sum = 0f64;
        for (r, c0, c1) in self.row_segments() {
            let n = (c1 - c0) as f64;
            row_sum += r as f64 * n;
            // sum of c0..c1-1
            col_sum += (c0 as f64 + (c1 - 1) as f64) * n / 2.0;
        }
        let a = self.area as f64;
        Ok((row_sum / a, col_sum / a))
    }

    /// Foreground pixel nearest to a point in pixel-index coordinates; ties
    /// go to the first pixel in row-major order.
    pub fn nearest_pixel(&self, row: f64, col: f64) -> Option<(u32, u32)> {
        let mut best: Option<(f64, (u32, u32))> = None;
        for (r, c0, c1) in self.row_segments() {
            let c = col.round().clamp(c0 as f64, (c1 - 1) as f64) as u32;
            let d = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, (r, c)));
            }
        }
        best.map(|(_, p)| p)
    }

    /// Connected foreground components ordered by the top-left corner of
    /// their bounding boxes.
    pub fn connected_components(&self, connectivity: Connectivity) -> Vec<BinaryMask> {
        let segments: Vec<(u32, u32, u32)> = self.row_segments().collect();
        if segments.is_empty() {
            return Vec::new();
        }
        let reach = match connectivity {
            Connectivity::Four => 0u32,
            Connectivity::Eight => 1u32,
        };
        let mut sets = DisjointSet::new(segments.len());
        // segments are in raster order; track the span of the previous row
        let mut prev_start = 0usize;
        let mut prev_end = 0usize;
        let mut i = 0usize;
        while i < segments.len() {
            let row = segments[i].0;
            let mut j = i;
            while j < segments.len() && segments[j].0 == row {
                j += 1;
            }
            let prev_is_adjacent = prev_end > prev_start && segments[prev_start].0 + 1 == row;
            if prev_is_adjacent {
                let mut p = prev_start;
                for cur in i..j {
                    let (_, c0, c1) = segments[cur];
                    // advance past previous-row segments that end too far left
                    while p < prev_end && segments[p].2 + reach <= c0 {
                        p += 1;
                    }
                    let mut q = p;
                    while q < prev_end && segments[q].1 < c1 + reach {
                        sets.union(cur, q);
                        q += 1;
                    }
                }
            }
            prev_start = i;
            prev_end = j;
            i = j;
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; segments.len()];
        for idx in 0..segments.len() {
            let root = sets.find(idx);
            if slot[root] == usize::MAX {
                slot[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[root]].push(idx);
        }
        let w = self.width as u64;
        let mut comps: Vec<(u64, BinaryMask)> = groups
            .into_iter()
            .map(|group| {
                let first = segments[group[0]];
                let first_idx = first.0 as u64 * w + first.1 as u64;
                let mask = BinaryMask::from_spans(
                    self.height,
                    self.width,
                    group.iter().map(|&g| {
                        let (r, c0, c1) = segments[g];
                        (r as u64 * w + c0 as u64, r as u64 * w + c1 as u64)
                    }),
                );
                (first_idx, mask)
            })
            .collect();
        comps.sort_by(|(ia, a), (ib, b)| {
            let ba = a.bbox.expect("component nonempty");
            let bb = b.bbox.expect("component nonempty");
            (ba.row_min, ba.col_min, ia).cmp(&(bb.row_min, bb.col_min, ib))
        });
        comps.into_iter().map(|(_, m)| m).collect()
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: u32) -> BinaryMask {
        self.morph(radius, true)
    }

    /// Chebyshev erosion by `radius` pixels; pixels outside the raster count
    /// as background.
    pub fn erode(&self, radius: u32) -> BinaryMask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: u32, dilate: bool) -> BinaryMask {
        if radius == 0 || self.is_empty() {
            return self.clone();
        }
        let h = self.height as usize;
        let w = self.width as usize;
        let r = radius as usize;
        let src = self.decode();
        let mut tmp = vec![false; h * w];
        // separable square structuring element: rows then columns
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                let row = &src[y * w + lo..=y * w + hi];
                let touches_edge = x < r || x + r >= w;
                tmp[y * w + x] = if dilate {
                    row.iter().any(|&v| v)
                } else {
                    !touches_edge && row.iter().all(|&v| v)
                };
            }
        }
        let mut out = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let touches_edge = y < r || y + r >= h;
            for x in 0..w {
                let mut col = (lo..=hi).map(|yy| tmp[yy * w + x]);
                out[y * w + x] = if dilate {
                    col.any(|v| v)
                } else {
                    !touches_edge && col.all(|v| v)
                };
            }
        }
        BinaryMask::encode(self.height, self.width, &out).expect("dimensions already validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

pub(crate) struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the sets of `a` and `b`, returning the new root.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> usize {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return ra;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => {
                self.parent[ra] = rb;
                rb
            }
            Ordering::Greater => {
                self.parent[rb] = ra;
                ra
            }
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
                ra
            }
        }
    }
}

/// Granularity tag of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Object,
    Part,
    Subpart,
    Best,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    score: f64,
    pub level: Level,
    pub prompt_id: Option<u32>,
}

impl ScoredMask {
    pub fn new(mask: BinaryMask, score: f64, level: Level) -> Result<Self, MaskError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(MaskError::InvalidScore(score));
        }
        Ok(Self { mask, score, level, prompt_id: None })
    }

    pub fn with_prompt(mut self, prompt_id: u32) -> Self {
        self.prompt_id = Some(prompt_id);
        self
    }

    /// Same score, level and prompt with different geometry.
    pub fn with_mask(&self, mask: BinaryMask) -> Self {
        Self { mask, score: self.score, level: self.level, prompt_id: self.prompt_id }
    }

    /// Same geometry with a new score, clamped to `[0, 1]`.
    pub fn with_score(&self, score: f64) -> Self {
        Self { mask: self.mask.clone(), score: score.clamp(0.0, 1.0), level: self.level, prompt_id: self.prompt_id }
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn area(&self) -> u64 {
        self.mask.area()
    }
}

/// Descending score, then ascending prompt id (absent last), then input order.
pub(crate) fn score_order(masks: &[ScoredMask]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b]
            .score
            .total_cmp(&masks[a].score)
            .then_with(|| match (masks[a].prompt_id, masks[b].prompt_id) {
                (Some(x), Some(y)) => x.cmp(&y),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            })
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. A mask survives iff its IoU with every
/// previously kept mask is at most `iou_threshold`.
pub fn nms(masks: &[ScoredMask], iou_threshold: f64) -> Vec<ScoredMask> {
    nms_by(masks, |_| iou_threshold)
}

/// Greedy suppression where each kept mask carries its own threshold.
pub(crate) fn nms_by(masks: &[ScoredMask], threshold_of: impl Fn(&ScoredMask) -> f64) -> Vec<ScoredMask> {
    let mut kept: Vec<(&ScoredMask, f64)> = Vec::new();
    for idx in score_order(masks) {
        let cand = &masks[idx];
        let suppressed = kept.iter().any(|(k, thr)| {
            // mismatched sizes never suppress each other
            k.mask.iou(&cand.mask).map(|v| v > *thr).unwrap_or(false)
        });
        if !suppressed {
            kept.push((cand, threshold_of(cand)));
        }
    }
    kept.into_iter().map(|(m, _)| m.clone()).collect()
}

/// Union of all masks, or an empty mask of the given size.
pub fn union_all<'a>(
    height: u32,
    width: u32,
    masks: impl IntoIterator<Item = &'a BinaryMask>,
) -> Result<BinaryMask, MaskError> {
    let mut acc = BinaryMask::empty(height, width)?;
    for m in masks {
        acc = acc.union(m)?;
    }
    Ok(acc)
}

/// Interchange record: `{"size": [h, w], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleRecord {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl From<&BinaryMask> for RleRecord {
    fn from(mask: &BinaryMask) -> Self {
        RleRecord { size: [mask.height, mask.width], counts: mask.runs.clone() }
    }
}

impl TryFrom<&RleRecord> for BinaryMask {
    type Error = MaskError;

    fn try_from(rec: &RleRecord) -> Result<Self, Self::Error> {
        BinaryMask::from_runs(rec.size[0], rec.size[1], &rec.counts)
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RleRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rec = RleRecord::deserialize(deserializer)?;
        BinaryMask::try_from(&rec).map_err(serde::de::Error::custom)
    }
}

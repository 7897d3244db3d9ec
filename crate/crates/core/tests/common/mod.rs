//! Dense-bitmap reference implementations and seeded random inputs shared by
//! the property and acceptance tests.

#![allow(dead_code)]

use entity_refine::{BinaryMask, EntityMap, Level, ScoredMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub h: u32,
    pub w: u32,
    pub bits: Vec<bool>,
}

impl Dense {
    pub fn of(m: &BinaryMask) -> Self {
        Self { h: m.height(), w: m.width(), bits: m.decode() }
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn zip(&self, o: &Dense, f: impl Fn(bool, bool) -> bool) -> Dense {
        Dense { h: self.h, w: self.w, bits: self.bits.iter().zip(&o.bits).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn iou(&self, o: &Dense) -> f64 {
        let inter = self.zip(o, |a, b| a && b).area();
        let union = self.zip(o, |a, b| a || b).area();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::encode(self.h, self.w, &self.bits).unwrap()
    }
}

/// Row-major run lengths starting with background, written pixel by pixel.
pub fn naive_runs(bits: &[bool]) -> Vec<u32> {
    let mut runs = vec![0u32];
    let mut cur = false;
    for &b in bits {
        if b != cur {
            runs.push(0);
            cur = b;
        }
        *runs.last_mut().unwrap() += 1;
    }
    if runs.len() > 1 && *runs.last().unwrap() == 0 {
        runs.pop();
    }
    runs
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random raster: noise, a union of rectangles, or one of the two extremes.
pub fn random_bits(rng: &mut ChaCha8Rng, h: u32, w: u32) -> Vec<bool> {
    let n = (h * w) as usize;
    match rng.random_range(0..10) {
        0 => vec![false; n],
        1 => vec![true; n],
        2..=4 => {
            let p: f64 = rng.random_range(0.05..0.95);
            (0..n).map(|_| rng.random_bool(p)).collect()
        }
        _ => {
            let mut bits = vec![false; n];
            for _ in 0..rng.random_range(1..5) {
                let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (r1, c1) = (rng.random_range(r0..h) + 1, rng.random_range(c0..w) + 1);
                for r in r0..r1 {
                    for c in c0..c1 {
                        bits[(r * w + c) as usize] = true;
                    }
                }
            }
            bits
        }
    }
}

pub fn random_size(rng: &mut ChaCha8Rng) -> (u32, u32) {
    (rng.random_range(1..=64), rng.random_range(1..=64))
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: u32, w: u32) -> BinaryMask {
    BinaryMask::encode(h, w, &random_bits(rng, h, w)).unwrap()
}

/// Random scored masks with coarse scores so ties occur, and prompt ids on
/// about half of them.
pub fn random_scored(rng: &mut ChaCha8Rng, h: u32, w: u32, n: usize) -> Vec<ScoredMask> {
    (0..n)
        .map(|_| {
            let s = rng.random_range(0..=10) as f64 / 10.0;
            let m = ScoredMask::new(random_mask(rng, h, w), s, Level::Object).unwrap();
            if rng.random_bool(0.5) {
                m.with_prompt(rng.random_range(0..4))
            } else {
                m
            }
        })
        .collect()
}

/// Indices in rank order: score descending, prompt id ascending with absent
/// ids last, input index ascending.
pub fn rank(masks: &[ScoredMask]) -> Vec<usize> {
    let key = |i: usize| {
        let m = &masks[i];
        (std::cmp::Reverse(ordered(m.score())), m.prompt_id.map_or((1, 0), |p| (0, p)), i)
    };
    let mut idx: Vec<usize> = (0..masks.len()).collect();
    idx.sort_by_key(|&i| key(i));
    idx
}

fn ordered(x: f64) -> u64 {
    // scores lie in [0, 1], so the bit pattern orders them
    x.to_bits()
}

/// O(n^2) dense NMS: a mask is kept iff its IoU with every kept mask is at
/// most `thr`. Returns kept input indices.
pub fn dense_nms(masks: &[ScoredMask], thr: f64) -> Vec<usize> {
    let dense: Vec<Dense> = masks.iter().map(|m| Dense::of(&m.mask)).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in rank(masks) {
        if kept.iter().all(|&k| dense[k].iou(&dense[i]) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// Searches every partial one-to-one assignment of predictions to ground
/// truths with IoU at or above `t`, and returns the one that is
/// lexicographically best in prediction rank order (higher IoU first,
/// lower gt index on equal IoU, unmatched worst). Output is indexed by
/// prediction.
pub fn exhaustive_match(ious: &[Vec<f64>], order: &[usize], n_gt: usize, t: f64) -> Vec<Option<usize>> {
    fn key(ious: &[Vec<f64>], order: &[usize], a: &[Option<usize>]) -> Vec<(u8, u64, i64)> {
        order
            .iter()
            .map(|&p| match a[p] {
                Some(g) => (1, ious[p][g].to_bits(), -(g as i64)),
                None => (0, 0, 0),
            })
            .collect()
    }
    fn search(
        p: usize,
        ious: &[Vec<f64>],
        order: &[usize],
        n_gt: usize,
        t: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(u8, u64, i64)>, Vec<Option<usize>>)>,
    ) {
        if p == ious.len() {
            let k = key(ious, order, cur);
            if best.as_ref().is_none_or(|(bk, _)| k > *bk) {
                *best = Some((k, cur.clone()));
            }
            return;
        }
        cur[p] = None;
        search(p + 1, ious, order, n_gt, t, used, cur, best);
        for g in 0..n_gt {
            if !used[g] && ious[p][g] >= t {
                used[g] = true;
                cur[p] = Some(g);
                search(p + 1, ious, order, n_gt, t, used, cur, best);
                used[g] = false;
            }
        }
        cur[p] = None;
    }
    let mut best = None;
    search(0, ious, order, n_gt, t, &mut vec![false; n_gt], &mut vec![None; ious.len()], &mut best);
    best.map(|(_, a)| a).unwrap_or_default()
}

/// 101-point AP from hit flags in rank order, taking the maximum precision
/// over every operating point whose recall reaches each sample.
pub fn reference_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Single-image AP at threshold `t` computed through the exhaustive matcher.
pub fn exhaustive_ap(preds: &[ScoredMask], gts: &[BinaryMask], t: f64) -> f64 {
    let dp: Vec<Dense> = preds.iter().map(|m| Dense::of(&m.mask)).collect();
    let dg: Vec<Dense> = gts.iter().map(Dense::of).collect();
    let ious: Vec<Vec<f64>> = dp.iter().map(|p| dg.iter().map(|g| p.iou(g)).collect()).collect();
    let order = rank(preds);
    let assign = exhaustive_match(&ious, &order, gts.len(), t);
    let hits: Vec<bool> = order.iter().map(|&p| assign[p].is_some()).collect();
    reference_ap(&hits, gts.len())
}

/// Disjoint masks made by labelling each pixel with one of `k` labels
/// (label 0 is background). Empty labels are skipped.
pub fn random_partition(rng: &mut ChaCha8Rng, h: u32, w: u32, k: u32) -> Vec<BinaryMask> {
    let cells = 4u32;
    let labels: Vec<u32> = (0..cells * cells).map(|_| rng.random_range(0..=k)).collect();
    (1..=k)
        .filter_map(|l| {
            let m = BinaryMask::from_fn(h, w, |r, c| labels[((r * cells / h) * cells + c * cells / w) as usize] == l).unwrap();
            (!m.is_empty()).then_some(m)
        })
        .collect()
}

pub fn entity_map(h: u32, w: u32, masks: &[BinaryMask], scores: &[f64]) -> EntityMap {
    let sm = masks.iter().zip(scores).map(|(m, &s)| ScoredMask::new(m.clone(), s, Level::Object).unwrap()).collect();
    EntityMap::new(h, w, sm).unwrap()
}

/// Piecewise-constant color blocks with optional per-pixel noise.
pub fn random_image(rng: &mut ChaCha8Rng, h: u32, w: u32) -> entity_refine::raster::ColorImage {
    let blocks = rng.random_range(1..5u32);
    let palette: Vec<[f32; 3]> = (0..blocks * blocks).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let noise: f32 = if rng.random_bool(0.5) { rng.random_range(0.0..0.1) } else { 0.0 };
    let pixels = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let base = palette[((r * blocks / h) * blocks + c * blocks / w) as usize];
            base.map(|v| (v + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0))
        })
        .collect();
    entity_refine::raster::ColorImage::new(h, w, pixels).unwrap()
}

//! Entity-level mask refinement: split overlapping object masks under
//! gallery guidance, then merge adjacent fragments that a gallery mask
//! spans.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::debug;
use rayon::prelude::*;

use crate::backend::{FeatureGrid, PointPrompt};
use crate::config::PipelineConfig;
use crate::entity::EntityMap;
use crate::mask::{score_order, union_all, BinaryMask, ScoredMask};
use crate::mmg::MmgOutput;
use crate::raster::srgb_to_lab;
use crate::superpixel::SuperpixelMap;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub object: ScoredMask,
    pub best: ScoredMask,
}

/// Fine-grid object and best masks keyed by prompt id.
#[derive(Debug, Clone, Default)]
pub struct MaskGallery {
    by_prompt: BTreeMap<u32, GalleryEntry>,
    all_masks: Vec<ScoredMask>,
}

impl MaskGallery {
    pub fn len(&self) -> usize {
        self.by_prompt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_prompt.is_empty()
    }

    pub fn get(&self, prompt_id: u32) -> Option<&GalleryEntry> {
        self.by_prompt.get(&prompt_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, &GalleryEntry)> {
        self.by_prompt.iter().map(|(&k, v)| (k, v))
    }

    /// Distinct gallery masks, object and best levels together, each with
    /// the highest score it was produced with.
    pub fn all_masks(&self) -> &[ScoredMask] {
        &self.all_masks
    }

    /// The highest-scored gallery mask matching `a ∪ b` with IoU at least
    /// `gamma` while covering at least `cover` of each of `a` and `b`.
    pub fn spanning(&self, a: &BinaryMask, b: &BinaryMask, gamma: f64, cover: f64) -> Option<&ScoredMask> {
        let u = a.union(b).ok()?;
        let ub = u.bbox()?;
        let mut found: Option<&ScoredMask> = None;
        for g in &self.all_masks {
            let ok = g.mask.bbox().is_some_and(|gb| gb.intersects(&ub))
                && g.mask.iou(&u).is_ok_and(|v| v >= gamma)
                && covers(&g.mask, a, cover)
                && covers(&g.mask, b, cover);
            if ok && found.is_none_or(|f| g.score() > f.score()) {
                found = Some(g);
            }
        }
        found
    }

    pub fn spans(&self, a: &BinaryMask, b: &BinaryMask, gamma: f64, cover: f64) -> bool {
        self.spanning(a, b, gamma, cover).is_some()
    }
}

fn covers(g: &BinaryMask, m: &BinaryMask, frac: f64) -> bool {
    g.intersection_area(m).is_ok_and(|i| i as f64 >= frac * m.area() as f64)
}

/// Builds the gallery from id-aligned object and best lists. Prompts whose
/// object or best mask is empty are left out.
pub fn build_gallery(object: &[ScoredMask], best: &[ScoredMask]) -> Result<MaskGallery> {
    if object.len() != best.len() {
        return Err(Error::Validation(format!(
            "gallery lists differ in length: {} object vs {} best",
            object.len(),
            best.len()
        )));
    }
    let mut gallery = MaskGallery::default();
    let mut seen: HashMap<(u32, u32, Vec<u32>), usize> = HashMap::new();
    for (i, (o, b)) in object.iter().zip(best).enumerate() {
        if o.mask.is_empty() || b.mask.is_empty() {
            continue;
        }
        let id = o.prompt_id.or(b.prompt_id).unwrap_or(i as u32);
        if b.prompt_id.is_some_and(|bid| bid != id) {
            return Err(Error::Validation(format!("gallery entry {i} mixes prompts {id} and {:?}", b.prompt_id)));
        }
        for m in [o, b] {
            let key = (m.mask.height(), m.mask.width(), m.mask.runs().to_vec());
            match seen.get(&key) {
                Some(&k) if gallery.all_masks[k].score() >= m.score() => {}
                Some(&k) => gallery.all_masks[k] = m.clone().with_prompt(id),
                None => {
                    seen.insert(key, gallery.all_masks.len());
                    gallery.all_masks.push(m.clone().with_prompt(id));
                }
            }
        }
        gallery.by_prompt.insert(id, GalleryEntry { object: o.clone(), best: b.clone() });
    }
    Ok(gallery)
}

/// Guidance mask for an overlap region: each fine prompt inside `region`
/// votes for its object mask when the best score exceeds the object score
/// by less than `tau`, otherwise for its best mask; the most frequent mask
/// wins, earliest prompt first on ties.
pub fn guidance<'g>(
    region: &BinaryMask,
    gallery: &'g MaskGallery,
    prompts: &[PointPrompt],
    tau: f64,
) -> Option<&'g BinaryMask> {
    let bbox = region.bbox()?;
    let mut votes: Vec<(&BinaryMask, usize)> = Vec::new();
    for p in prompts {
        let (r, c) = p.pixel();
        if !bbox.contains(r, c) || !region.contains(r, c) {
            continue;
        }
        let Some(entry) = gallery.get(p.id) else { continue };
        let pick = if entry.best.score() - entry.object.score() < tau { &entry.object } else { &entry.best };
        match votes.iter_mut().find(|(m, _)| *m == &pick.mask) {
            Some(v) => v.1 += 1,
            None => votes.push((&pick.mask, 1)),
        }
    }
    let mut winner: Option<(&BinaryMask, usize)> = None;
    for (m, n) in votes {
        if winner.is_none_or(|(_, wn)| n > wn) {
            winner = Some((m, n));
        }
    }
    winner.map(|(m, _)| m)
}

/// Split residues that vanish under an erosion of this radius are dropped.
pub const SLIVER_RADIUS: u32 = 1;

/// Resolves pairwise overlaps. Masks are visited in score order; for each
/// overlapping pair a small overlap (relative to the larger mask, below
/// `delta`) is removed from the larger mask, and a large one goes entirely
/// to the mask agreeing better with the gallery guidance. Residues thinner
/// than [`SLIVER_RADIUS`] are dropped, and each survivor's score is scaled
/// by the fraction of its area it kept. The result is pairwise disjoint, in
/// score order.
pub fn split_overlaps(
    masks: &[ScoredMask],
    gallery: &MaskGallery,
    prompts: &[PointPrompt],
    delta: f64,
    tau: f64,
) -> Result<Vec<ScoredMask>> {
    let mut ms: Vec<ScoredMask> =
        score_order(masks).into_iter().map(|i| masks[i].clone()).filter(|m| !m.mask.is_empty()).collect();
    let n = ms.len();
    let original: Vec<u64> = ms.iter().map(|m| m.area()).collect();
    let originals: Vec<BinaryMask> = ms.iter().map(|m| m.mask.clone()).collect();
    loop {
        let mut changed = false;
        for p in 0..n {
            for q in p + 1..n {
                if ms[p].mask.is_empty() || ms[q].mask.is_empty() {
                    continue;
                }
                let overlap = ms[p].mask.intersect(&ms[q].mask)?;
                if overlap.is_empty() {
                    continue;
                }
                changed = true;
                let (ap, aq) = (ms[p].area(), ms[q].area());
                let larger = if ap > aq { p } else { q };
                let ratio = overlap.area() as f64 / ap.max(aq) as f64;
                let loser = if ratio < delta {
                    larger
                } else {
                    match guidance(&overlap, gallery, prompts, tau) {
                        Some(g) => {
                            if originals[p].iou(g)? >= originals[q].iou(g)? {
                                q
                            } else {
                                p
                            }
                        }
                        None => larger,
                    }
                };
                log::trace!(
                    "split: {:?} ({} px) vs {:?} ({} px), overlap {} px, {:?} loses",
                    ms[p].prompt_id,
                    ap,
                    ms[q].prompt_id,
                    aq,
                    overlap.area(),
                    ms[loser].prompt_id
                );
                let trimmed = ms[loser].mask.subtract(&overlap)?;
                ms[loser] = ms[loser].with_mask(trimmed);
            }
        }
        if !changed {
            break;
        }
    }
    let out: Vec<ScoredMask> = ms
        .into_iter()
        .zip(original)
        .filter(|(m, a0)| m.area() == *a0 || !m.mask.erode(SLIVER_RADIUS).is_empty())
        .map(|(m, a0)| if m.area() == a0 { m } else { m.with_score(m.score() * m.area() as f64 / a0 as f64) })
        .collect();
    let order = score_order(&out);
    Ok(order.into_iter().map(|i| out[i].clone()).collect())
}

/// Superpixel-centroid similarities, reduced to each centroid's top-k
/// neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSimilarity {
    n: usize,
    values: Vec<f64>,
}

impl CentroidSimilarity {
    /// Cosine similarity of the given vectors. A zero vector has similarity
    /// 0 to every other vector and 1 to itself.
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Self {
        let n = vectors.len();
        let norms: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let values: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let (vi, ni) = (&vectors[i], norms[i]);
                let norms = &norms;
                (0..n).map(move |j| {
                    if i == j {
                        1.0
                    } else if ni == 0.0 || norms[j] == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = vi.iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                        (dot / (ni * norms[j])).clamp(-1.0, 1.0)
                    }
                })
            })
            .collect();
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// The `k` most similar other centroids of `i`, lower index first on ties.
    pub fn top_k(&self, i: usize, k: usize) -> Vec<usize> {
        let mut others: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| self.get(i, b).total_cmp(&self.get(i, a)).then(a.cmp(&b)));
        others.truncate(k);
        others
    }
}

/// Samples `features` bilinearly at every superpixel centroid and compares
/// the samples.
pub fn centroid_similarity(features: &FeatureGrid, sp: &SuperpixelMap) -> CentroidSimilarity {
    let sy = sp.height() as f64 / features.height as f64;
    let sx = sp.width() as f64 / features.width as f64;
    let vectors: Vec<Vec<f64>> = sp
        .regions()
        .iter()
        .map(|r| {
            let (cr, cc) = r.centroid;
            features.sample((cr + 0.5) / sy - 0.5, (cc + 0.5) / sx - 0.5)
        })
        .collect();
    CentroidSimilarity::from_vectors(&vectors)
}

/// Fallback descriptor per superpixel when the provider has no features:
/// mean Lab color scaled to roughly unit range, plus the normalised
/// centroid.
pub fn color_similarity(sp: &SuperpixelMap) -> CentroidSimilarity {
    let (h, w) = (sp.height() as f64, sp.width() as f64);
    let vectors: Vec<Vec<f64>> = sp
        .regions()
        .iter()
        .map(|r| {
            let c = r.mean_color;
            let lab = srgb_to_lab([c[0] as f32, c[1] as f32, c[2] as f32]);
            vec![lab[0] / 100.0, lab[1] / 128.0, lab[2] / 128.0, r.centroid.0 / h, r.centroid.1 / w]
        })
        .collect();
    CentroidSimilarity::from_vectors(&vectors)
}

/// Row-normalised counts of how often the top-k neighbours of a mask's
/// centroids land in each other mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySimilarity {
    k: usize,
    counts: Vec<Vec<u64>>,
    sizes: Vec<u64>,
}

impl AdjacencySimilarity {
    pub fn new(masks: &[ScoredMask], sp: &SuperpixelMap, sim: &CentroidSimilarity, k: usize) -> Self {
        let n = masks.len();
        let owner: Vec<Option<usize>> = (0..sp.len())
            .map(|l| {
                let (r, c) = sp.centroid_pixel(l);
                masks.iter().position(|m| m.mask.contains(r, c))
            })
            .collect();
        let mut counts = vec![vec![0u64; n]; n];
        let mut sizes = vec![0u64; n];
        for (c, o) in owner.iter().enumerate() {
            let Some(i) = *o else { continue };
            sizes[i] += 1;
            for nb in sim.top_k(c, k) {
                if let Some(j) = owner[nb] {
                    if j != i {
                        counts[i][j] += 1;
                    }
                }
            }
        }
        Self { k, counts, sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Number of centroids inside mask `i`.
    pub fn centroids(&self, i: usize) -> u64 {
        self.sizes[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j || self.sizes[i] == 0 {
            return 0.0;
        }
        self.counts[i][j] as f64 / (self.sizes[i] as f64 * self.k as f64)
    }

    /// Folds mask `b` into mask `a`; `b` keeps an all-zero row and column.
    pub fn merge(&mut self, a: usize, b: usize) {
        let n = self.sizes.len();
        for j in 0..n {
            let moved = std::mem::take(&mut self.counts[b][j]);
            self.counts[a][j] += moved;
        }
        for i in 0..n {
            let moved = std::mem::take(&mut self.counts[i][b]);
            self.counts[i][a] += moved;
        }
        self.counts[a][a] = 0;
        self.sizes[a] += std::mem::take(&mut self.sizes[b]);
    }
}

/// Repeatedly merges the most similar pair with similarity (the larger of
/// the two directions) at least `merge_threshold` that a gallery mask spans.
/// The merged mask takes the geometry of the highest-scored spanning gallery
/// mask, minus pixels held by other masks, and keeps the higher score.
pub fn merge_similar(
    masks: &[ScoredMask],
    adjacency: &mut AdjacencySimilarity,
    gallery: &MaskGallery,
    merge_threshold: f64,
    containment_gamma: f64,
    cover: f64,
) -> Result<Vec<ScoredMask>> {
    let mut slots: Vec<Option<ScoredMask>> = masks.iter().cloned().map(Some).collect();
    let mut rejected: HashSet<(usize, usize)> = HashSet::new();
    loop {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for a in 0..slots.len() {
            for b in a + 1..slots.len() {
                if slots[a].is_none() || slots[b].is_none() || rejected.contains(&(a, b)) {
                    continue;
                }
                let s = adjacency.get(a, b).max(adjacency.get(b, a));
                if s >= merge_threshold && s > 0.0 {
                    pairs.push((s, a, b));
                }
            }
        }
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut merged = None;
        for (_, a, b) in pairs {
            let (ma, mb) = (slots[a].as_ref().unwrap(), slots[b].as_ref().unwrap());
            if let Some(g) = gallery.spanning(&ma.mask, &mb.mask, containment_gamma, cover) {
                merged = Some((a, b, g));
                break;
            }
            rejected.insert((a, b));
        }
        let Some((a, b, g)) = merged else { break };
        let mb = slots[b].take().unwrap();
        let ma = slots[a].take().unwrap();
        let keep = if mb.score() > ma.score() { &mb } else { &ma };
        // the spanning gallery mask replaces the pair, minus pixels other masks hold
        let others = union_all(g.mask.height(), g.mask.width(), slots.iter().flatten().map(|m| &m.mask))?;
        let clipped = g.mask.subtract(&others)?;
        let geometry = if clipped.is_empty() { ma.mask.union(&mb.mask)? } else { clipped };
        slots[a] = Some(keep.with_mask(geometry));
        adjacency.merge(a, b);
        rejected.retain(|&(x, y)| x != a && y != a);
        debug!("emr: merged mask {b} into {a}");
    }
    Ok(slots.into_iter().flatten().collect())
}

/// Split-then-merge over the refined object masks.
pub fn run_emr(mmg: &MmgOutput, features: Option<&FeatureGrid>, config: &PipelineConfig) -> Result<EntityMap> {
    let (h, w) = (mmg.superpixels.height(), mmg.superpixels.width());
    let gallery = build_gallery(&mmg.fine.object, &mmg.fine.best)?;
    let split = split_overlaps(&mmg.object_refined, &gallery, &mmg.fine_prompts, config.delta, config.tau)?;
    let sim = match features {
        Some(f) => centroid_similarity(f, &mmg.superpixels),
        None => color_similarity(&mmg.superpixels),
    };
    let mut adjacency = AdjacencySimilarity::new(&split, &mmg.superpixels, &sim, config.top_k);
    let merged = merge_similar(
        &split,
        &mut adjacency,
        &gallery,
        config.merge_threshold,
        config.containment_gamma,
        config.merge_cover,
    )?;
    debug!("emr: {} masks after split, {} after merge", split.len(), merged.len());
    Ok(EntityMap::new(h, w, merged)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Level;
    use crate::raster::ColorImage;

    fn sm(h: u32, w: u32, f: impl FnMut(u32, u32) -> bool, score: f64) -> ScoredMask {
        ScoredMask::new(BinaryMask::from_fn(h, w, f).unwrap(), score, Level::Object).unwrap()
    }

    fn entry(id: u32, obj: ScoredMask, best: ScoredMask) -> (ScoredMask, ScoredMask) {
        let mut b = best.with_prompt(id);
        b.level = Level::Best;
        (obj.with_prompt(id), b)
    }

    #[test]
    fn gallery_construction() {
        let g = build_gallery(&[], &[]).unwrap();
        assert!(g.is_empty());
        let full = sm(4, 4, |_, _| true, 0.9);
        let empty = sm(4, 4, |_, _| false, 0.0);
        let (o0, b0) = entry(0, full.clone(), full.clone());
        let (o1, b1) = entry(1, empty.clone(), empty);
        let g = build_gallery(&[o0, o1], &[b0, b1]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.all_masks().len(), 1);
        assert_eq!(g.get(0).unwrap().object.prompt_id, g.get(0).unwrap().best.prompt_id);
        assert!(build_gallery(&[full], &[]).is_err());
    }

    #[test]
    fn disjoint_masks_unchanged() {
        let a = sm(4, 4, |r, _| r < 2, 0.9);
        let b = sm(4, 4, |r, _| r >= 2, 0.8);
        let out = split_overlaps(&[b.clone(), a.clone()], &MaskGallery::default(), &[], 0.05, 0.1).unwrap();
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn small_overlap_leaves_the_larger_mask() {
        // 10x10 block (100 px) and a 10x8 block (80 px) sharing 3 px
        let big = sm(20, 20, |r, c| r < 10 && c < 10, 0.6);
        let small = sm(20, 20, |r, c| (r < 10 && (12..20).contains(&c)) || (r < 3 && c == 9), 0.9);
        assert_eq!((big.area(), small.area()), (100, 83));
        let small = small.with_mask(small.mask.subtract(&BinaryMask::from_fn(20, 20, |r, c| r < 3 && c == 12).unwrap()).unwrap());
        assert_eq!(small.area(), 80);
        let out = split_overlaps(&[big.clone(), small.clone()], &MaskGallery::default(), &[], 0.05, 0.1).unwrap();
        assert_eq!(out[0], small);
        assert_eq!(out[1].area(), 97);
        assert_eq!(out[1].mask, big.mask.subtract(&small.mask).unwrap());
    }

    #[test]
    fn thin_residue_is_dropped() {
        let inner = sm(20, 20, |r, c| (5..15).contains(&r) && (5..15).contains(&c), 0.9);
        let outer = sm(20, 20, |r, c| (4..16).contains(&r) && (4..16).contains(&c), 0.8);
        let out = split_overlaps(&[outer, inner.clone()], &MaskGallery::default(), &[], 0.05, 0.1).unwrap();
        assert_eq!(out, vec![inner]);
    }

    /// Two masks sharing a 4-row band; one fine prompt sits in the band.
    fn guided_case(object_score: f64, best_score: f64) -> Vec<ScoredMask> {
        let top = sm(16, 8, |r, _| r < 10, 0.9);
        let bottom = sm(16, 8, |r, _| r >= 6, 0.8);
        let (o, b) = entry(
            0,
            sm(16, 8, |r, _| r >= 6, object_score),
            sm(16, 8, |r, _| r < 10, best_score),
        );
        let gallery = build_gallery(&[o], &[b]).unwrap();
        let prompts = [PointPrompt::new(8.5, 4.5, 0)];
        split_overlaps(&[top, bottom], &gallery, &prompts, 0.05, 0.1).unwrap()
    }

    #[test]
    fn guidance_selects_object_within_tolerance() {
        // best - object = 0.05 < tau: object-level guidance (the bottom mask)
        // wins the band; the top mask kept 6 of 10 rows so its score drops
        // to 0.9 * 0.6 and it now ranks second
        let out = guided_case(0.85, 0.9);
        assert_eq!(out[0].area(), 10 * 8);
        assert!(out[0].mask.contains(8, 0));
        assert_eq!(out[1].area(), 6 * 8);
        assert!((out[1].score() - 0.54).abs() < 1e-12);
    }

    #[test]
    fn guidance_selects_best_beyond_tolerance() {
        let out = guided_case(0.5, 0.9);
        assert_eq!(out[0].area(), 10 * 8);
        assert!(out[0].mask.contains(8, 0));
        assert_eq!(out[1].area(), 6 * 8);
    }

    #[test]
    fn modal_guidance() {
        let region = BinaryMask::full(4, 4).unwrap();
        let a = sm(4, 4, |r, _| r < 2, 0.9);
        let b = sm(4, 4, |r, _| r >= 2, 0.9);
        let pairs = [entry(0, a.clone(), a.clone()), entry(1, b.clone(), b.clone()), entry(2, b.clone(), b.clone())];
        let (o, bs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let g = build_gallery(&o, &bs).unwrap();
        let prompts = [PointPrompt::new(0.5, 0.5, 0), PointPrompt::new(3.5, 0.5, 1), PointPrompt::new(3.5, 3.5, 2)];
        assert_eq!(guidance(&region, &g, &prompts, 0.1), Some(&b.mask));
        assert_eq!(guidance(&region, &g, &prompts[..2], 0.1), Some(&a.mask));
        assert_eq!(guidance(&region, &g, &[], 0.1), None);
    }

    #[test]
    fn cosine_examples() {
        let s = CentroidSimilarity::from_vectors(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ]);
        assert!((s.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(0, 4), 1.0);
        assert_eq!((s.get(3, 3), s.get(3, 0), s.get(0, 3)), (1.0, 0.0, 0.0));
        assert_eq!(s.get(1, 0), s.get(0, 1));
        assert_eq!(s.top_k(0, 2), vec![4, 1]);
    }

    /// Four vertical stripes, one superpixel each, with centroids at
    /// columns 1.5, 5.5, 9.5, 13.5.
    fn stripes() -> SuperpixelMap {
        let image = ColorImage::filled(4, 16, [0.5; 3]).unwrap();
        let raw: Vec<usize> = (0..64).map(|i| (i % 16) / 4).collect();
        SuperpixelMap::from_labels(&image, &raw)
    }

    #[test]
    fn adjacency_trace() {
        let sp = stripes();
        // stripe 0 is most similar to stripe 2, stripes 1 and 3 to each other
        let sim = CentroidSimilarity::from_vectors(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.1],
            vec![0.1, 1.0],
        ]);
        let m1 = sm(4, 16, |_, c| c < 4, 0.9);
        let m2 = sm(4, 16, |_, c| (8..12).contains(&c), 0.8);
        let m3 = sm(4, 16, |_, c| c >= 4 && c < 8 || c >= 12, 0.7);
        let adj = AdjacencySimilarity::new(&[m1, m2, m3], &sp, &sim, 1);
        assert_eq!(adj.get(0, 1), 1.0);
        assert_eq!(adj.get(1, 0), 1.0);
        assert_eq!(adj.get(2, 0), 0.0);
        assert_eq!(adj.get(2, 2), 0.0);
        assert_eq!(adj.centroids(2), 2);
    }

    #[test]
    fn adjacency_merge_matches_rebuild() {
        let sp = stripes();
        let sim = CentroidSimilarity::from_vectors(&[
            vec![1.0, 0.2],
            vec![0.3, 1.0],
            vec![1.0, 0.1],
            vec![0.1, 1.0],
        ]);
        let ms: Vec<ScoredMask> = (0..4).map(|s| sm(4, 16, |_, c| c / 4 == s, 0.5)).collect();
        for k in 1..=3 {
            let mut adj = AdjacencySimilarity::new(&ms, &sp, &sim, k);
            adj.merge(1, 3);
            let merged = vec![
                ms[0].clone(),
                ms[1].with_mask(ms[1].mask.union(&ms[3].mask).unwrap()),
                ms[2].clone(),
                sm(4, 16, |_, _| false, 0.5),
            ];
            let rebuilt = AdjacencySimilarity::new(&merged, &sp, &sim, k);
            assert_eq!(adj, rebuilt, "k = {k}");
        }
    }

    fn halves() -> (ScoredMask, ScoredMask) {
        (sm(8, 8, |_, c| c < 4, 0.7), sm(8, 8, |_, c| c >= 4, 0.9))
    }

    fn stripe_adjacency(ms: &[ScoredMask]) -> AdjacencySimilarity {
        // two superpixels, one per half, similar to each other
        let image = ColorImage::filled(8, 8, [0.5; 3]).unwrap();
        let raw: Vec<usize> = (0..64).map(|i| (i % 8) / 4).collect();
        let sp = SuperpixelMap::from_labels(&image, &raw);
        let sim = CentroidSimilarity::from_vectors(&[vec![1.0], vec![1.0]]);
        AdjacencySimilarity::new(ms, &sp, &sim, 1)
    }

    #[test]
    fn merge_needs_gallery_support() {
        let (a, b) = halves();
        let full = sm(8, 8, |_, _| true, 1.0);
        let (o, bst) = entry(0, full.clone(), full);
        let gallery = build_gallery(&[o], &[bst]).unwrap();
        let ms = [a.clone(), b.clone()];
        let out = merge_similar(&ms, &mut stripe_adjacency(&ms), &gallery, 0.5, 0.7, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].area(), 64);
        assert_eq!(out[0].score(), 0.9);

        let out = merge_similar(&ms, &mut stripe_adjacency(&ms), &MaskGallery::default(), 0.5, 0.7, 0.5).unwrap();
        assert_eq!(out, ms.to_vec());

        // no pair reaches the threshold
        let out = merge_similar(&ms, &mut stripe_adjacency(&ms), &gallery, 1.1, 0.7, 0.5).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn gallery_mask_must_cover_both_partners() {
        // a big mask and a small neighbour: the big mask alone has IoU
        // 56/64 with the union but covers none of the neighbour
        let big = sm(8, 8, |_, c| c < 7, 0.9);
        let small = sm(8, 8, |_, c| c == 7, 0.8);
        let (o, b) = entry(0, big.clone(), big.clone());
        let g = build_gallery(&[o], &[b]).unwrap();
        assert!(!g.spans(&big.mask, &small.mask, 0.7, 0.5));
        assert!(g.spans(&big.mask, &small.mask, 0.7, 0.0));
    }
}

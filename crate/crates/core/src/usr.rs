//! Under-segmentation refinement: prompt the superpixel regions no entity
//! covers and greedily add the answers to the entity map.

use log::{debug, warn};

use crate::backend::{segment, BackendError, PointPrompt, Segmenter};
use crate::config::PipelineConfig;
use crate::entity::EntityMap;
use crate::mask::{score_order, BinaryMask, Level, ScoredMask};
use crate::mmg::MmgOutput;
use crate::superpixel::SuperpixelMap;
use crate::Result;

/// First prompt id handed to additional prompts, above any grid id.
pub const PROMPT_ID_BASE: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct UncoveredRegion {
    pub mask: BinaryMask,
    pub source_superpixels: Vec<u32>,
}

/// One region per superpixel with less than `coverage_fraction` of its
/// pixels covered, in label order. Superpixels under `min_region_px` pixels
/// are dropped.
pub fn uncovered_regions(
    entity_map: &EntityMap,
    sp: &SuperpixelMap,
    coverage_fraction: f64,
    min_region_px: u64,
) -> Result<Vec<UncoveredRegion>> {
    let (h, w) = (sp.height(), sp.width());
    if (entity_map.height(), entity_map.width()) != (h, w) {
        return Err(crate::Error::Validation("entity map and superpixel map differ in size".into()));
    }
    let labels = sp.labels();
    let mut covered = vec![0u64; sp.len()];
    for (s, e) in entity_map.union_mask().spans() {
        for &l in &labels[s as usize..e as usize] {
            covered[l as usize] += 1;
        }
    }
    let open: Vec<u32> = sp
        .regions()
        .iter()
        .zip(&covered)
        .enumerate()
        .filter(|(_, (r, &c))| (c as f64) < coverage_fraction * r.area as f64 && r.area >= min_region_px)
        .map(|(l, _)| l as u32)
        .collect();
    open.into_iter()
        .map(|l| {
            let mask = BinaryMask::from_fn(h, w, |r, c| sp.label_at(r, c) == l)?;
            Ok(UncoveredRegion { mask, source_superpixels: vec![l] })
        })
        .collect()
}

fn prompt_at(mask: &BinaryMask, id: u32) -> Option<PointPrompt> {
    let (cr, cc) = mask.centroid().ok()?;
    // a centroid outside a non-convex mask is moved to the nearest inside pixel
    let (r, c) = mask.nearest_pixel(cr, cc)?;
    Some(PointPrompt::new(r as f64 + 0.5, c as f64 + 0.5, id))
}

/// One prompt per region: the centroid of the highest-scored part or
/// subpart mask holding at least `containment_frac` of the region, else the
/// region's own centroid. Prompts within 1 px of an earlier one are
/// dropped.
pub fn additional_prompts(
    regions: &[UncoveredRegion],
    part: &[ScoredMask],
    subpart: &[ScoredMask],
    containment_frac: f64,
) -> Vec<PointPrompt> {
    let pool: Vec<ScoredMask> = part.iter().chain(subpart).filter(|m| !m.mask.is_empty()).cloned().collect();
    let order = score_order(&pool);
    let mut out: Vec<PointPrompt> = Vec::new();
    for region in regions {
        let area = region.mask.area() as f64;
        let holder = order.iter().map(|&i| &pool[i]).find(|m| {
            m.mask.intersection_area(&region.mask).is_ok_and(|a| a as f64 >= containment_frac * area)
        });
        let target = holder.map_or(&region.mask, |m| &m.mask);
        let id = PROMPT_ID_BASE + out.len() as u32;
        let Some(p) = prompt_at(target, id) else {
            warn!("usr: skipping empty region");
            continue;
        };
        if out.iter().any(|q| (q.row - p.row).hypot(q.col - p.col) <= 1.0) {
            continue;
        }
        out.push(p);
    }
    out
}

/// Inserts each additional mask: clipped to uncovered pixels, then joined to
/// the entity it overlaps best (IoU before clipping above `rho`) or appended
/// as a new entity.
pub fn fuse(entity_map: &EntityMap, additional: &[ScoredMask], rho: f64) -> Result<EntityMap> {
    let (h, w) = (entity_map.height(), entity_map.width());
    let mut masks = entity_map.masks().to_vec();
    for add in additional {
        let union = crate::mask::union_all(h, w, masks.iter().map(|m| &m.mask))?;
        let clipped = add.mask.subtract(&union)?;
        let mut best: Option<(f64, usize)> = None;
        for (i, m) in masks.iter().enumerate() {
            let v = add.mask.iou(&m.mask)?;
            if v > rho && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, i));
            }
        }
        match best {
            Some((v, i)) => {
                log::trace!("usr: fused into {:?} at IoU {v:.3}, {} px added", masks[i].prompt_id, clipped.area());
                let grown = masks[i].mask.union(&clipped)?;
                masks[i] = masks[i].with_mask(grown);
            }
            None if !clipped.is_empty() => masks.push(add.with_mask(clipped)),
            None => {}
        }
    }
    Ok(EntityMap::from_disjoint(h, w, masks))
}

/// Accepts candidates by largest uncovered gain (higher score, then lower
/// prompt id on ties) until the best gain drops below `min_gain_px`. A
/// candidate whose gain is under `min_gain_frac` of its area counts as no
/// gain.
pub fn greedy_fill(
    entity_map: &EntityMap,
    candidates: &[ScoredMask],
    rho: f64,
    min_gain_px: u64,
    min_gain_frac: f64,
) -> Result<(EntityMap, usize)> {
    let mut map = entity_map.clone();
    let mut remaining: Vec<&ScoredMask> = score_order(candidates).into_iter().map(|i| &candidates[i]).collect();
    let mut accepted = 0;
    while !remaining.is_empty() {
        let union = map.union_mask();
        let mut best: Option<(u64, usize)> = None;
        for (i, c) in remaining.iter().enumerate() {
            let mut gain = c.area() - c.mask.intersection_area(&union)?;
            if (gain as f64) < min_gain_frac * c.area() as f64 {
                gain = 0;
            }
            // `remaining` is in tie-break order, so only a strictly larger gain wins
            if best.is_none_or(|(bg, _)| gain > bg) {
                best = Some((gain, i));
            }
        }
        let (gain, i) = best.expect("nonempty");
        if gain < min_gain_px || gain == 0 {
            break;
        }
        let pick = remaining.remove(i);
        log::trace!("usr: accept prompt {:?} ({} px, score {:.3}), gain {gain}", pick.prompt_id, pick.area(), pick.score());
        map = fuse(&map, std::slice::from_ref(pick), rho)?;
        accepted += 1;
    }
    Ok((map, accepted))
}

/// Candidate for a prompt: the object level, or the best-scored level when
/// the object mask is empty.
fn candidate(triple: &crate::backend::MaskTriple) -> Option<ScoredMask> {
    if !triple.object.mask.is_empty() {
        return Some(triple.object.clone());
    }
    let mut best: Option<&ScoredMask> = None;
    for m in [&triple.part, &triple.subpart] {
        if !m.mask.is_empty() && best.is_none_or(|b| m.score() > b.score()) {
            best = Some(m);
        }
    }
    best.map(|m| {
        let mut m = m.clone();
        m.level = Level::Object;
        m
    })
}

/// One refinement pass over `entity_map`.
pub fn run_usr(
    provider: &mut dyn Segmenter,
    mmg: &MmgOutput,
    entity_map: &EntityMap,
    config: &PipelineConfig,
) -> Result<EntityMap> {
    let regions = uncovered_regions(entity_map, &mmg.superpixels, config.coverage_fraction, config.min_region_px)?;
    let prompts = additional_prompts(&regions, &mmg.part_thinned, &mmg.subpart_thinned, config.containment_frac);
    let mut candidates = Vec::new();
    for p in &prompts {
        match segment(provider, std::slice::from_ref(p)) {
            Ok(mut ts) => candidates.extend(candidate(&ts.remove(0)).filter(|c| c.score() >= config.usr_min_score)),
            Err(BackendError::PromptMiss { prompt_id, radius }) => {
                warn!("usr: prompt {prompt_id} has no recorded answer within {radius:.2} px, skipped");
            }
            Err(e) => return Err(e.into()),
        }
    }
    let (map, accepted) = greedy_fill(entity_map, &candidates, config.rho, config.min_gain_px, config.min_gain_frac)?;
    debug!(
        "usr: {} regions, {} prompts, {} candidates, {accepted} accepted",
        regions.len(),
        prompts.len(),
        candidates.len()
    );
    Ok(map)
}

//! Multi-level mask generation: stratify per-prompt triples into level maps,
//! filter the object level and thin the finer levels with density-aware NMS.

use log::debug;

use crate::backend::{grid_prompts, segment, MaskTriple, PointPrompt, Segmenter};
use crate::config::PipelineConfig;
use crate::mask::{nms, nms_by, Level, ScoredMask};
use crate::raster::ColorImage;
use crate::superpixel::{density_map, felzenszwalb, mask_density, DensityMap, SuperpixelMap};
use crate::{Error, Result};

/// Per-prompt level maps for one prompt grid. Entry `i` of every list
/// belongs to the same prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMaps {
    pub grid_n: u32,
    pub object: Vec<ScoredMask>,
    pub part: Vec<ScoredMask>,
    pub subpart: Vec<ScoredMask>,
    /// Highest-scored level per prompt, tagged [`Level::Best`].
    pub best: Vec<ScoredMask>,
    /// Level each best mask was taken from.
    pub best_source: Vec<Level>,
}

impl LevelMaps {
    pub fn len(&self) -> usize {
        self.object.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object.is_empty()
    }

    /// Every level of every prompt, best level excluded.
    pub fn pooled(&self) -> Vec<ScoredMask> {
        self.object.iter().chain(&self.part).chain(&self.subpart).cloned().collect()
    }
}

/// Splits triples into level maps. Ties on the best score prefer the
/// coarser level.
pub fn stratify(grid_n: u32, triples: &[MaskTriple]) -> Result<LevelMaps> {
    let mut maps = LevelMaps {
        grid_n,
        object: Vec::with_capacity(triples.len()),
        part: Vec::with_capacity(triples.len()),
        subpart: Vec::with_capacity(triples.len()),
        best: Vec::with_capacity(triples.len()),
        best_source: Vec::with_capacity(triples.len()),
    };
    for t in triples {
        if !t.is_area_ordered() {
            return Err(Error::Validation(format!("triple for prompt {} is not ordered by area", t.prompt_id)));
        }
        let mut best = &t.object;
        for m in [&t.part, &t.subpart] {
            if m.score() > best.score() {
                best = m;
            }
        }
        maps.best_source.push(best.level);
        let mut b = best.clone();
        b.level = Level::Best;
        maps.best.push(b);
        maps.object.push(t.object.clone());
        maps.part.push(t.part.clone());
        maps.subpart.push(t.subpart.clone());
    }
    Ok(maps)
}

fn nonempty(masks: &[ScoredMask]) -> Vec<ScoredMask> {
    masks.iter().filter(|m| !m.mask.is_empty()).cloned().collect()
}

/// Naive NMS at `theta_o`, then keeps a survivor iff its best IoU against
/// any best-level mask reaches `gamma_o`.
pub fn filter_object_level(
    object: &[ScoredMask],
    best: &[ScoredMask],
    theta_o: f64,
    gamma_o: f64,
) -> Vec<ScoredMask> {
    let best: Vec<&ScoredMask> = best.iter().filter(|m| !m.mask.is_empty()).collect();
    nms(&nonempty(object), theta_o)
        .into_iter()
        .filter(|m| {
            best.iter().any(|b| m.mask.iou(&b.mask).map(|v| v >= gamma_o).unwrap_or(false))
        })
        .collect()
}

/// Greedy NMS where a kept mask `k` suppresses candidates whose IoU with it
/// exceeds `max(n_t, mask_density(k))`. Empty masks are dropped.
pub fn adaptive_nms(masks: &[ScoredMask], density: &DensityMap, n_t: f64) -> Vec<ScoredMask> {
    nms_by(&nonempty(masks), |k| {
        n_t.max(mask_density(density, &k.mask).unwrap_or(0.0))
    })
}

#[derive(Debug, Clone)]
pub struct MmgOutput {
    pub coarse: LevelMaps,
    pub object_refined: Vec<ScoredMask>,
    pub part_thinned: Vec<ScoredMask>,
    pub subpart_thinned: Vec<ScoredMask>,
    pub fine: LevelMaps,
    pub fine_prompts: Vec<PointPrompt>,
    pub superpixels: SuperpixelMap,
    pub density: DensityMap,
}

fn level_maps(provider: &mut dyn Segmenter, n: u32) -> Result<(LevelMaps, Vec<PointPrompt>)> {
    let (h, w) = provider.size();
    let prompts = grid_prompts(h, w, n);
    let triples = segment(provider, &prompts)?;
    Ok((stratify(n, &triples)?, prompts))
}

/// Queries both grids and builds every MMG product.
pub fn run_mmg(provider: &mut dyn Segmenter, image: &ColorImage, config: &PipelineConfig) -> Result<MmgOutput> {
    let (h, w) = provider.size();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Validation(format!(
            "image is {}x{} but provider is bound to {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let (coarse, _) = level_maps(provider, config.grid_coarse)?;
    let object_refined = filter_object_level(&coarse.object, &coarse.best, config.theta_o, config.gamma_o);
    let superpixels = felzenszwalb(image, &config.superpixel_params(h, w))?;
    let density = density_map(&superpixels);
    let part_thinned = adaptive_nms(&coarse.part, &density, config.n_t);
    let subpart_thinned = adaptive_nms(&coarse.subpart, &density, config.n_t);
    let (fine, fine_prompts) = level_maps(provider, config.grid_fine)?;
    debug!(
        "mmg: {} object masks kept, {} parts, {} subparts, {} superpixels",
        object_refined.len(),
        part_thinned.len(),
        subpart_thinned.len(),
        superpixels.len()
    );
    Ok(MmgOutput { coarse, object_refined, part_thinned, subpart_thinned, fine, fine_prompts, superpixels, density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::SyntheticOracle;
    use crate::backend::scene::{EntitySpec, NoiseProfile, SceneSpec, Shape, SplitAxis};
    use crate::mask::BinaryMask;

    fn sm(f: impl FnMut(u32, u32) -> bool, score: f64, level: Level) -> ScoredMask {
        ScoredMask::new(BinaryMask::from_fn(10, 10, f).unwrap(), score, level).unwrap()
    }

    fn triple(scores: [f64; 3]) -> MaskTriple {
        MaskTriple {
            prompt_id: 0,
            object: sm(|r, _| r < 6, scores[0], Level::Object),
            part: sm(|r, _| r < 4, scores[1], Level::Part),
            subpart: sm(|r, _| r < 2, scores[2], Level::Subpart),
        }
    }

    #[test]
    fn stratify_best_level() {
        let cases = [([0.9, 0.5, 0.4], Level::Object), ([0.5, 0.9, 0.4], Level::Part), ([0.7, 0.7, 0.7], Level::Object)];
        for (scores, want) in cases {
            let maps = stratify(1, &[triple(scores)]).unwrap();
            assert_eq!(maps.best_source, vec![want]);
            assert_eq!(maps.best[0].level, Level::Best);
        }
        let maps = stratify(1, &[triple([0.1, 0.2, 0.9])]).unwrap();
        assert_eq!(maps.best[0].mask, maps.subpart[0].mask);
        let mut bad = triple([0.5; 3]);
        std::mem::swap(&mut bad.object, &mut bad.subpart);
        assert!(stratify(1, &[bad]).is_err());
    }

    #[test]
    fn object_filter_branches() {
        let obj = sm(|r, _| r < 5, 0.9, Level::Object);
        let far = sm(|r, _| r >= 8, 0.8, Level::Object);
        let empty = sm(|_, _| false, 0.99, Level::Object);
        let best = vec![sm(|r, _| r < 5, 0.9, Level::Best)];
        let kept = filter_object_level(&[obj.clone(), far, empty], &best, 0.8, 0.6);
        assert_eq!(kept, vec![obj]);
    }

    /// Two masks with IoU 0.6: rows 0..8 and rows 2..10 share 6 rows of 10.
    fn pair() -> Vec<ScoredMask> {
        vec![sm(|r, _| r < 8, 0.9, Level::Part), sm(|r, _| r >= 2, 0.8, Level::Part)]
    }

    #[test]
    fn adaptive_nms_density_examples() {
        let p = pair();
        assert!((p[0].mask.iou(&p[1].mask).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(adaptive_nms(&p, &DensityMap::uniform(10, 10, 0.7), 0.5).len(), 2);
        assert_eq!(adaptive_nms(&p, &DensityMap::uniform(10, 10, 0.3), 0.5).len(), 1);
        assert_eq!(adaptive_nms(&p, &DensityMap::uniform(10, 10, 0.0), 0.5), nms(&p, 0.5));
    }

    #[test]
    fn adaptive_nms_reads_density_of_kept_mask() {
        let p = pair();
        // dense only under the higher-scored mask's exclusive rows
        let values: Vec<f64> = (0..100).map(|i| if i < 20 { 1.0 } else { 0.5 }).collect();
        let d = DensityMap::from_values(10, 10, values);
        // density of kept mask: (20*1 + 60*0.5)/80 = 0.625 >= 0.6
        assert_eq!(adaptive_nms(&p, &d, 0.5).len(), 2);
    }

    fn scene(noise: NoiseProfile) -> SceneSpec {
        let rect = |top, left, color| EntitySpec {
            shape: Shape::Rect { top, left, height: 18, width: 18 },
            color,
            parts: 2,
            split: SplitAxis::Cols,
        };
        SceneSpec {
            height: 64,
            width: 64,
            background: [0.1, 0.1, 0.12],
            entities: vec![rect(4, 4, [0.8, 0.2, 0.2]), rect(4, 40, [0.2, 0.7, 0.3]), rect(40, 20, [0.3, 0.3, 0.9])],
            noise,
        }
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig { grid_coarse: 16, grid_fine: 32, ..PipelineConfig::default() }
    }

    #[test]
    fn noiseless_scene_recovers_every_entity() {
        let spec = scene(NoiseProfile::noiseless(0));
        let mut o = SyntheticOracle::new(spec.clone()).unwrap();
        let image = o.image().clone();
        let out = run_mmg(&mut o, &image, &small_config()).unwrap();
        let gt = spec.ground_truth().unwrap();
        for g in gt.masks() {
            assert!(out.object_refined.iter().any(|m| m.mask == g.mask));
        }
        assert_eq!(out.object_refined.len(), 3);
        assert_eq!(out.coarse.len(), 256);
        assert_eq!(out.fine.len(), 1024);
        assert_eq!(out.fine_prompts.len(), 1024);
    }

    #[test]
    fn empty_scene_yields_empty_levels() {
        let spec = SceneSpec { entities: vec![], ..scene(NoiseProfile::noiseless(0)) };
        let mut o = SyntheticOracle::new(spec).unwrap();
        let image = o.image().clone();
        let out = run_mmg(&mut o, &image, &small_config()).unwrap();
        assert!(out.object_refined.is_empty() && out.part_thinned.is_empty() && out.subpart_thinned.is_empty());
        assert!(out.fine.object.iter().all(|m| m.mask.is_empty()));
        assert_eq!(out.superpixels.len(), 1);
    }

    #[test]
    fn run_is_deterministic() {
        let spec = scene(NoiseProfile::noisy(4));
        let cfg = small_config();
        let run = || {
            let mut o = SyntheticOracle::new(spec.clone()).unwrap();
            let image = o.image().clone();
            let out = run_mmg(&mut o, &image, &cfg).unwrap();
            (out.object_refined, out.part_thinned, out.subpart_thinned)
        };
        assert_eq!(run(), run());
    }
}

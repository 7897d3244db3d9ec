//! The full MMG, EMR, USR chain with per-module switches.
//!
//! A disabled module is replaced by a pass-through:
//! - without MMG, every level of the coarse grid is pooled and thinned by
//!   plain NMS at `theta_o`, with no best-level filter and no adaptive NMS;
//! - without EMR, the object candidates are made disjoint by pasting in
//!   score order;
//! - without USR, the EMR output is final.
//!
//! With all three off this is the automatic-mask-generation baseline.

use crate::backend::Segmenter;
use crate::config::PipelineConfig;
use crate::entity::EntityMap;
use crate::mask::{nms, ScoredMask};
use crate::mmg::{run_mmg, MmgOutput};
use crate::raster::ColorImage;
use crate::{emr, usr, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stages {
    pub mmg: bool,
    pub emr: bool,
    pub usr: bool,
}

impl Stages {
    pub const FULL: Stages = Stages { mmg: true, emr: true, usr: true };
    pub const BASELINE: Stages = Stages { mmg: false, emr: false, usr: false };
}

impl Default for Stages {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub entity_map: EntityMap,
    /// Entity map after each stage, named `mmg`, `emr`, `usr`.
    pub stages: Vec<(&'static str, EntityMap)>,
}

/// Replaces the object candidates and the part/subpart pools USR draws on
/// when MMG is switched off.
fn apply_mmg_switch(mmg: &mut MmgOutput, stages: Stages, config: &PipelineConfig) {
    if stages.mmg {
        return;
    }
    let nonempty = |v: &[ScoredMask]| v.iter().filter(|m| !m.mask.is_empty()).cloned().collect::<Vec<_>>();
    mmg.part_thinned = nonempty(&mmg.coarse.part);
    mmg.subpart_thinned = nonempty(&mmg.coarse.subpart);
    mmg.object_refined = nms(&nonempty(&mmg.coarse.pooled()), config.theta_o);
}

pub fn run(
    provider: &mut dyn Segmenter,
    image: &ColorImage,
    config: &PipelineConfig,
    stages: Stages,
) -> Result<PipelineOutput> {
    let (h, w) = provider.size();
    let mut mmg = run_mmg(provider, image, config)?;
    apply_mmg_switch(&mut mmg, stages, config);
    let mut dumps = Vec::new();
    dumps.push(("mmg", EntityMap::paste_by_score(h, w, &mmg.object_refined)?));
    let mut map = if stages.emr {
        let features = provider.embed()?;
        emr::run_emr(&mmg, features.as_ref(), config)?
    } else {
        dumps[0].1.clone()
    };
    dumps.push(("emr", map.clone()));
    if stages.usr {
        map = usr::run_usr(provider, &mmg, &map, config)?;
    }
    dumps.push(("usr", map.clone()));
    Ok(PipelineOutput { entity_map: map, stages: dumps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::SyntheticOracle;
    use crate::backend::scene::{NoiseProfile, SceneGenerator};
    use crate::backend::Memoized;

    fn small() -> (SceneGenerator, PipelineConfig) {
        let g = SceneGenerator { height: 64, width: 64, require_grid: Some(16), ..SceneGenerator::default() };
        let c = PipelineConfig { grid_coarse: 16, grid_fine: 32, ..PipelineConfig::default() };
        (g, c)
    }

    #[test]
    fn baseline_is_pooled_nms() {
        let (g, cfg) = small();
        let spec = g.generate(3, NoiseProfile::noisy(3));
        let mut o = Memoized::new(SyntheticOracle::new(spec).unwrap());
        let image = o.inner().image().clone();
        let out = run(&mut o, &image, &cfg, Stages::BASELINE).unwrap();
        let mmg = run_mmg(&mut o, &image, &cfg).unwrap();
        let pooled: Vec<ScoredMask> = mmg.coarse.pooled().into_iter().filter(|m| !m.mask.is_empty()).collect();
        let direct = EntityMap::paste_by_score(64, 64, &nms(&pooled, cfg.theta_o)).unwrap();
        assert_eq!(out.entity_map, direct);
        assert_eq!(out.stages.len(), 3);
    }

    #[test]
    fn every_variant_is_disjoint() {
        let (g, cfg) = small();
        for seed in 0..3 {
            let spec = g.generate(seed, NoiseProfile::noisy(seed));
            let mut o = Memoized::new(SyntheticOracle::new(spec).unwrap());
            let image = o.inner().image().clone();
            for bits in 0..8u8 {
                let st = Stages { mmg: bits & 1 != 0, emr: bits & 2 != 0, usr: bits & 4 != 0 };
                let out = run(&mut o, &image, &cfg, st).unwrap();
                assert_eq!(out.entity_map.overlap_pixels(), 0);
                for (_, m) in &out.stages {
                    assert_eq!(m.overlap_pixels(), 0);
                }
            }
        }
    }
}

//! Seeded synthetic benchmark over pipeline variants.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::backend::oracle::SyntheticOracle;
use crate::backend::scene::{NoiseProfile, SceneGenerator};
use crate::backend::Memoized;
use crate::config::PipelineConfig;
use crate::entity::EntityMap;
use crate::eval::{average_precision, coco_thresholds, EvalResult};
use crate::pipeline::{run, Stages};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Noiseless,
    Noisy,
}

impl NoiseKind {
    pub fn profile(self, seed: u64) -> NoiseProfile {
        match self {
            Self::Noiseless => NoiseProfile::noiseless(seed),
            Self::Noisy => NoiseProfile::noisy(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub stages: Stages,
}

const fn v(name: &'static str, mmg: bool, emr: bool, usr: bool) -> Variant {
    Variant { name, stages: Stages { mmg, emr, usr } }
}

/// All eight module combinations, baseline first and full pipeline last.
pub const VARIANTS: [Variant; 8] = [
    v("baseline", false, false, false),
    v("mmg", true, false, false),
    v("emr", false, true, false),
    v("usr", false, false, true),
    v("mmg+emr", true, true, false),
    v("mmg+usr", true, false, true),
    v("emr+usr", false, true, true),
    v("full", true, true, true),
];

pub fn variant(name: &str) -> Option<Variant> {
    VARIANTS.iter().copied().find(|v| v.name == name)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: Variant,
    pub result: EvalResult,
    /// Largest overlap found in any scene's output.
    pub max_overlap_px: u64,
    pub masks: usize,
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub scenes: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    pub generator: SceneGenerator,
}

/// Runs every variant on `spec.scenes` scenes seeded `seed, seed+1, ...`.
/// Scenes run in parallel; each scene's segmenter answers are shared by
/// all variants.
pub fn synth_bench(spec: &BenchSpec, config: &PipelineConfig, variants: &[Variant]) -> Result<Vec<BenchRow>> {
    let per_scene: Vec<(EntityMap, Vec<EntityMap>)> = (0..spec.scenes as u64)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed + i;
            let scene = spec.generator.generate(seed, spec.noise.profile(seed));
            let gt = scene.ground_truth()?;
            let mut provider = Memoized::new(SyntheticOracle::new(scene)?);
            let image = provider.inner().image().clone();
            let maps = variants
                .iter()
                .map(|v| run(&mut provider, &image, config, v.stages).map(|o| o.entity_map))
                .collect::<Result<Vec<_>>>()?;
            Ok((gt, maps))
        })
        .collect::<Result<_>>()?;
    let gts: Vec<EntityMap> = per_scene.iter().map(|(g, _)| g.clone()).collect();
    variants
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let preds: Vec<EntityMap> = per_scene.iter().map(|(_, m)| m[k].clone()).collect();
            Ok(BenchRow {
                variant: *v,
                result: average_precision(&preds, &gts, &coco_thresholds())?,
                max_overlap_px: preds.iter().map(|p| p.overlap_pixels()).max().unwrap_or(0),
                masks: preds.iter().map(|p| p.len()).sum(),
            })
        })
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>3} {:>3} {:>3} {:>7} {:>7} {:>7} {:>7}", "variant", "MMG", "EMR", "USR", "AP", "AP50", "AP75", "masks");
    for r in rows {
        let st = r.variant.stages;
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>3} {:>3} {:>7.2} {:>7.2} {:>7.2} {:>7}",
            r.variant.name,
            mark(st.mmg),
            mark(st.emr),
            mark(st.usr),
            100.0 * r.result.ap,
            100.0 * r.result.ap50,
            100.0 * r.result.ap75,
            r.masks
        );
    }
    s
}

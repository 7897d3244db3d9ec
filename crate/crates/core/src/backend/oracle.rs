//! Segmenter that answers prompts from a synthetic scene's ground truth.
//!
//! Noiseless answers are exact: the object level is the entity, the part
//! level is the part holding the prompt, and the subpart level is the
//! quadrant of that part (split at the part centroid) holding the prompt.
//! Noise perturbs each answer deterministically per prompt location:
//! dropout swaps the object answer for the part, jitter dilates or erodes
//! the boundary, and scores are the IoU with the noiseless answer plus
//! Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::scene::{EntityTruth, SceneSpec};
use super::{BackendError, FeatureGrid, MaskTriple, PointPrompt, Segmenter};
use crate::mask::BinaryMask;
use crate::raster::ColorImage;

/// Feature stride of the oracle's embedding.
pub const FEATURE_STRIDE: u32 = 8;

pub struct SyntheticOracle {
    scene: SceneSpec,
    image: ColorImage,
    truths: Vec<EntityTruth>,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SyntheticOracle {
    pub fn new(scene: SceneSpec) -> Result<Self, BackendError> {
        let truths = scene.truths()?;
        let image = scene.render()?;
        Ok(Self { scene, image, truths })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn image(&self) -> &ColorImage {
        &self.image
    }

    fn rng_for(&self, prompt: &PointPrompt) -> ChaCha8Rng {
        let seed = mix(self.scene.noise.seed)
            ^ mix(prompt.row.to_bits().rotate_left(17))
            ^ mix(prompt.col.to_bits().wrapping_add(0x9e3779b97f4a7c15));
        ChaCha8Rng::seed_from_u64(mix(seed))
    }

    /// Noiseless (object, part, subpart) answers for a pixel.
    pub fn exact_levels(&self, row: u32, col: u32) -> Option<[BinaryMask; 3]> {
        let truth = self.truths.iter().find(|t| t.mask.contains(row, col))?;
        let part = truth.parts.iter().find(|p| p.contains(row, col))?;
        let (cr, cc) = part.centroid().ok()?;
        let below = row as f64 >= cr;
        let right = col as f64 >= cc;
        let quadrant = BinaryMask::from_fn(self.scene.height, self.scene.width, |r, c| {
            (r as f64 >= cr) == below && (c as f64 >= cc) == right
        })
        .ok()?;
        let subpart = part.intersect(&quadrant).ok()?;
        Some([truth.mask.clone(), part.clone(), subpart])
    }

    fn jitter(&self, mask: &BinaryMask, rng: &mut ChaCha8Rng, row: u32, col: u32) -> BinaryMask {
        let max = self.scene.noise.boundary_jitter_px;
        let radius = rng.random_range(0..=max);
        let grow = rng.random_bool(0.5);
        if radius == 0 {
            return mask.clone();
        }
        if !grow {
            let eroded = mask.erode(radius);
            if eroded.contains(row, col) {
                return eroded;
            }
        }
        mask.dilate(radius)
    }

    fn answer(&self, prompt: &PointPrompt) -> Result<MaskTriple, BackendError> {
        let (h, w) = (self.scene.height, self.scene.width);
        let (row, col) = prompt.pixel();
        let Some(exact) = self.exact_levels(row, col) else {
            let empty = BinaryMask::empty(h, w)?;
            return Ok(MaskTriple::from_unordered(
                prompt.id,
                [(empty.clone(), 0.0), (empty.clone(), 0.0), (empty, 0.0)],
            )?);
        };
        let noise = &self.scene.noise;
        if noise.is_noiseless() {
            let [o, p, s] = exact;
            return Ok(MaskTriple::from_unordered(prompt.id, [(o, 1.0), (p, 1.0), (s, 1.0)])?);
        }
        let mut rng = self.rng_for(prompt);
        let dropped = rng.random::<f64>() < noise.dropout_prob;
        let normal = Normal::new(0.0, noise.score_noise_std.max(f64::MIN_POSITIVE))
            .expect("finite std");
        let emitted = [
            if dropped { exact[1].clone() } else { exact[0].clone() },
            exact[1].clone(),
            exact[2].clone(),
        ];
        let mut out = Vec::with_capacity(3);
        for (emit, truth) in emitted.iter().zip(&exact) {
            let m = self.jitter(emit, &mut rng, row, col);
            let base = m.iou(truth)?;
            let eps = if noise.score_noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            out.push((m, (base + eps).clamp(0.0, 1.0)));
        }
        let arr: [(BinaryMask, f64); 3] = out.try_into().expect("three levels");
        Ok(MaskTriple::from_unordered(prompt.id, arr)?)
    }

    /// Mean-color patches at [`FEATURE_STRIDE`], three channels.
    pub fn features(&self) -> FeatureGrid {
        let (h, w) = (self.image.height(), self.image.width());
        let gh = h.div_ceil(FEATURE_STRIDE);
        let gw = w.div_ceil(FEATURE_STRIDE);
        let plane = (gh * gw) as usize;
        let mut data = vec![0f32; 3 * plane];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut acc = [0f64; 3];
                let mut n = 0f64;
                for r in gy * FEATURE_STRIDE..((gy + 1) * FEATURE_STRIDE).min(h) {
                    for c in gx * FEATURE_STRIDE..((gx + 1) * FEATURE_STRIDE).min(w) {
                        let p = self.image.get(r, c);
                        for ch in 0..3 {
                            acc[ch] += p[ch] as f64;
                        }
                        n += 1.0;
                    }
                }
                for ch in 0..3 {
                    data[ch * plane + (gy * gw + gx) as usize] = (acc[ch] / n) as f32;
                }
            }
        }
        FeatureGrid::new(3, gh, gw, data).expect("oracle grid is well formed")
    }
}

impl Segmenter for SyntheticOracle {
    fn size(&self) -> (u32, u32) {
        (self.scene.height, self.scene.width)
    }

    fn segment(&mut self, prompts: &[PointPrompt]) -> Result<Vec<MaskTriple>, BackendError> {
        let this = &*self;
        prompts.par_iter().map(|p| this.answer(p)).collect()
    }

    fn embed(&mut self) -> Result<Option<FeatureGrid>, BackendError> {
        Ok(Some(self.features()))
    }
}

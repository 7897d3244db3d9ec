//! Synthetic scenes: disjoint flat-colored entities split into parts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::entity::EntityMap;
use crate::mask::{BinaryMask, Level, ScoredMask};
use crate::raster::ColorImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { top: u32, left: u32, height: u32, width: u32 },
    Ellipse { center_row: f64, center_col: f64, radius_row: f64, radius_col: f64 },
    /// Vertical bar along the left edge of the box plus a horizontal bar
    /// along its bottom edge.
    LPolyomino { top: u32, left: u32, height: u32, width: u32, thickness: u32 },
}

impl Shape {
    pub fn contains(&self, row: u32, col: u32) -> bool {
        match *self {
            Shape::Rect { top, left, height, width } => {
                row >= top && row < top + height && col >= left && col < left + width
            }
            Shape::Ellipse { center_row, center_col, radius_row, radius_col } => {
                let dr = (row as f64 + 0.5 - center_row) / radius_row;
                let dc = (col as f64 + 0.5 - center_col) / radius_col;
                dr * dr + dc * dc <= 1.0
            }
            Shape::LPolyomino { top, left, height, width, thickness } => {
                let in_box = row >= top && row < top + height && col >= left && col < left + width;
                in_box && (col < left + thickness || row >= top + height - thickness)
            }
        }
    }

    pub fn rasterize(&self, height: u32, width: u32) -> Result<BinaryMask, BackendError> {
        Ok(BinaryMask::from_fn(height, width, |r, c| self.contains(r, c))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAxis {
    /// Parts stacked top to bottom.
    Rows,
    /// Parts side by side.
    Cols,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Number of parts, 1 to 4; parts are equal strips of the bounding box.
    pub parts: u8,
    pub split: SplitAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub boundary_jitter_px: u32,
    pub score_noise_std: f64,
    pub dropout_prob: f64,
    pub seed: u64,
}

impl NoiseProfile {
    pub fn noiseless(seed: u64) -> Self {
        Self { boundary_jitter_px: 0, score_noise_std: 0.0, dropout_prob: 0.0, seed }
    }

    /// 2 px jitter, 0.05 score noise, 0.3 dropout.
    pub fn noisy(seed: u64) -> Self {
        Self { boundary_jitter_px: 2, score_noise_std: 0.05, dropout_prob: 0.3, seed }
    }

    pub fn is_noiseless(&self) -> bool {
        self.boundary_jitter_px == 0 && self.score_noise_std == 0.0 && self.dropout_prob == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: u32,
    pub width: u32,
    pub background: [f32; 3],
    pub entities: Vec<EntitySpec>,
    pub noise: NoiseProfile,
}

/// Rasterized entity with its parts.
#[derive(Debug, Clone)]
pub struct EntityTruth {
    pub mask: BinaryMask,
    pub parts: Vec<BinaryMask>,
    pub part_colors: Vec<[f32; 3]>,
}

/// Snap a color to the 8-bit grid so rendered scenes survive a PNG round trip.
fn quantize(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

const PART_SHADES: [f32; 4] = [0.0, 0.07, -0.07, 0.14];

fn part_color(base: [f32; 3], idx: usize) -> [f32; 3] {
    quantize(base.map(|v| v + PART_SHADES[idx]))
}

impl SceneSpec {
    /// Rasterizes and validates every entity.
    pub fn truths(&self) -> Result<Vec<EntityTruth>, BackendError> {
        if self.height == 0 || self.width == 0 {
            return Err(BackendError::Scene("canvas must be nonempty".into()));
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.dropout_prob) || !(n.score_noise_std >= 0.0) {
            return Err(BackendError::Scene("invalid noise profile".into()));
        }
        let mut occupied = BinaryMask::empty(self.height, self.width)?;
        let mut out = Vec::with_capacity(self.entities.len());
        for (i, e) in self.entities.iter().enumerate() {
            if !(1..=4).contains(&e.parts) {
                return Err(BackendError::Scene(format!("entity {i} has {} parts", e.parts)));
            }
            let mask = e.shape.rasterize(self.height, self.width)?;
            if mask.is_empty() {
                return Err(BackendError::Scene(format!("entity {i} is empty")));
            }
            if occupied.intersection_area(&mask)? > 0 {
                return Err(BackendError::Scene(format!("entity {i} overlaps another entity")));
            }
            occupied = occupied.union(&mask)?;
            let b = mask.bbox().expect("nonempty");
            let k = e.parts as u32;
            let parts: Vec<BinaryMask> = (0..k)
                .map(|p| {
                    let (lo, hi, along_rows) = match e.split {
                        SplitAxis::Rows => (b.row_min, b.height(), true),
                        SplitAxis::Cols => (b.col_min, b.width(), false),
                    };
                    let start = lo + p * hi / k;
                    let end = lo + (p + 1) * hi / k;
                    let strip = BinaryMask::from_fn(self.height, self.width, |r, c| {
                        let v = if along_rows { r } else { c };
                        v >= start && v < end
                    })?;
                    mask.intersect(&strip)
                })
                .collect::<Result<_, _>>()?;
            if parts.iter().any(|p| p.is_empty()) {
                return Err(BackendError::Scene(format!("entity {i} has an empty part")));
            }
            let part_colors = (0..parts.len()).map(|p| part_color(e.color, p)).collect();
            out.push(EntityTruth { mask, parts, part_colors });
        }
        Ok(out)
    }

    pub fn render(&self) -> Result<ColorImage, BackendError> {
        let truths = self.truths()?;
        let mut img = ColorImage::filled(self.height, self.width, quantize(self.background))?;
        for t in &truths {
            for (part, &color) in t.parts.iter().zip(&t.part_colors) {
                for (r, c0, c1) in part.row_segments() {
                    for c in c0..c1 {
                        img.set(r, c, color);
                    }
                }
            }
        }
        Ok(img)
    }

    /// The noiseless entity map, one mask per entity with score 1.
    pub fn ground_truth(&self) -> Result<EntityMap, BackendError> {
        let masks = self
            .truths()?
            .into_iter()
            .map(|t| ScoredMask::new(t.mask, 1.0, Level::Object))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EntityMap::new(self.height, self.width, masks)?)
    }
}

/// Parameters of the random scene generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGenerator {
    pub height: u32,
    pub width: u32,
    pub min_entities: usize,
    pub max_entities: usize,
    pub min_extent: u32,
    pub max_extent: u32,
    /// Empty pixels kept between entities.
    pub gap: u32,
    /// Every entity must contain a point of this prompt grid, when set.
    pub require_grid: Option<u32>,
}

impl Default for SceneGenerator {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_entities: 3,
            max_entities: 7,
            min_extent: 14,
            max_extent: 46,
            gap: 3,
            require_grid: Some(32),
        }
    }
}

const PALETTE: [[f32; 3]; 10] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.65, 0.3],
    [0.25, 0.35, 0.85],
    [0.9, 0.8, 0.2],
    [0.7, 0.3, 0.75],
    [0.2, 0.75, 0.8],
    [0.95, 0.55, 0.15],
    [0.55, 0.4, 0.25],
    [0.85, 0.85, 0.85],
    [0.45, 0.8, 0.5],
];

impl SceneGenerator {
    /// Draws a scene from `seed`; the noise profile's seed is kept as given.
    pub fn generate(&self, seed: u64, noise: NoiseProfile) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rng.random_range(self.min_entities..=self.max_entities);
        let mut colors = PALETTE.to_vec();
        colors.shuffle(&mut rng);
        let grid = self
            .require_grid
            .map(|n| super::grid_prompts(self.height, self.width, n))
            .unwrap_or_default();
        let mut occupied = BinaryMask::empty(self.height, self.width).expect("canvas nonempty");
        let mut entities = Vec::new();
        let mut attempts = 0;
        while entities.len() < target && attempts < 500 {
            attempts += 1;
            let h = rng.random_range(self.min_extent..=self.max_extent).min(self.height - 2);
            let w = rng.random_range(self.min_extent..=self.max_extent).min(self.width - 2);
            let top = rng.random_range(1..self.height - h);
            let left = rng.random_range(1..self.width - w);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Rect { top, left, height: h, width: w },
                1 => Shape::Ellipse {
                    center_row: top as f64 + h as f64 / 2.0,
                    center_col: left as f64 + w as f64 / 2.0,
                    radius_row: h as f64 / 2.0,
                    radius_col: w as f64 / 2.0,
                },
                _ => Shape::LPolyomino {
                    top,
                    left,
                    height: h,
                    width: w,
                    thickness: (h.min(w) / 2).max(4),
                },
            };
            let Ok(mask) = shape.rasterize(self.height, self.width) else { continue };
            if mask.is_empty() || mask.dilate(self.gap).intersection_area(&occupied).unwrap_or(1) > 0 {
                continue;
            }
            if !grid.is_empty() {
                let hit = grid.iter().any(|p| {
                    let (r, c) = p.pixel();
                    mask.contains(r, c)
                });
                if !hit {
                    continue;
                }
            }
            let parts = rng.random_range(1..=3u8);
            let split = if rng.random_bool(0.5) { SplitAxis::Rows } else { SplitAxis::Cols };
            let spec = EntitySpec { shape, color: colors[entities.len() % colors.len()], parts, split };
            let probe = SceneSpec {
                height: self.height,
                width: self.width,
                background: [0.1; 3],
                entities: vec![spec.clone()],
                noise,
            };
            if probe.truths().is_err() {
                continue;
            }
            occupied = occupied.union(&mask).expect("same size");
            entities.push(spec);
        }
        SceneSpec {
            height: self.height,
            width: self.width,
            background: [0.1, 0.1, 0.12],
            entities,
            noise,
        }
    }
}

//! Promptable-segmenter providers.
//!
//! Every provider is bound to one image at construction and answers point
//! prompts with a [`MaskTriple`] per prompt. Three providers exist: the
//! [`oracle::SyntheticOracle`] over generated scenes, the
//! [`precomputed::PrecomputedProvider`] replaying a recorded directory, and
//! the [`external::ExternalProvider`] speaking newline-delimited JSON to a
//! child process.

pub mod external;
pub mod oracle;
pub mod precomputed;
pub mod scene;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, Level, MaskError, RleRecord, ScoredMask};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt {id} at ({row}, {col}) is outside the {height}x{width} image")]
    OutOfBounds { id: u32, row: f64, col: f64, height: u32, width: u32 },
    #[error("provider failed on prompt {prompt_id}: {message}")]
    Prompt { prompt_id: u32, message: String },
    #[error("no recorded prompt within {radius:.2} px of prompt {prompt_id}")]
    PromptMiss { prompt_id: u32, radius: f64 },
    #[error("provider returned {got} triples for {expected} prompts")]
    Misaligned { expected: usize, got: usize },
    #[error("remote error on request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
}

/// A point prompt in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrompt {
    pub row: f64,
    pub col: f64,
    pub id: u32,
}

impl PointPrompt {
    pub fn new(row: f64, col: f64, id: u32) -> Self {
        Self { row, col, id }
    }

    /// The pixel the prompt falls in.
    pub fn pixel(&self) -> (u32, u32) {
        (self.row.floor() as u32, self.col.floor() as u32)
    }

    pub fn in_bounds(&self, height: u32, width: u32) -> bool {
        self.row >= 0.0 && self.col >= 0.0 && self.row < height as f64 && self.col < width as f64
    }
}

/// Uniform `n × n` grid of cell-centred prompts, ids in row-major order.
pub fn grid_prompts(height: u32, width: u32, points_per_side: u32) -> Vec<PointPrompt> {
    let n = points_per_side;
    let (h, w) = (height as f64, width as f64);
    (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| {
                PointPrompt::new(
                    (i as f64 + 0.5) * h / n as f64,
                    (j as f64 + 0.5) * w / n as f64,
                    i * n + j,
                )
            })
        })
        .collect()
}

/// Object, part and subpart responses to one prompt, ordered by area.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTriple {
    pub prompt_id: u32,
    pub object: ScoredMask,
    pub part: ScoredMask,
    pub subpart: ScoredMask,
}

impl MaskTriple {
    /// Assigns levels by descending area; equal areas keep input order.
    pub fn from_unordered(
        prompt_id: u32,
        masks: [(BinaryMask, f64); 3],
    ) -> Result<Self, MaskError> {
        let mut masks = masks;
        masks.sort_by(|a, b| b.0.area().cmp(&a.0.area()));
        let [(o, so), (p, sp), (s, ss)] = masks;
        Ok(Self {
            prompt_id,
            object: ScoredMask::new(o, so, Level::Object)?.with_prompt(prompt_id),
            part: ScoredMask::new(p, sp, Level::Part)?.with_prompt(prompt_id),
            subpart: ScoredMask::new(s, ss, Level::Subpart)?.with_prompt(prompt_id),
        })
    }

    pub fn levels(&self) -> [&ScoredMask; 3] {
        [&self.object, &self.part, &self.subpart]
    }

    pub fn is_area_ordered(&self) -> bool {
        self.object.area() >= self.part.area() && self.part.area() >= self.subpart.area()
    }
}

/// Dense `C × h × w` feature grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(channels: u32, height: u32, width: u32, data: Vec<f32>) -> Result<Self, BackendError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(BackendError::Protocol("feature grid dimensions must be positive".into()));
        }
        if data.len() != (channels * height * width) as usize {
            return Err(BackendError::Protocol(format!(
                "feature grid expects {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("feature grid has non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn vector_at(&self, y: u32, x: u32) -> Vec<f32> {
        let plane = (self.height * self.width) as usize;
        let offset = (y * self.width + x) as usize;
        (0..self.channels as usize).map(|c| self.data[c * plane + offset]).collect()
    }

    /// Bilinear sample at fractional grid coordinates, clamped to the grid.
    pub fn sample(&self, y: f64, x: f64) -> Vec<f64> {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as u32, x.floor() as u32);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let plane = (self.height * self.width) as usize;
        let at = |c: usize, yy: u32, xx: u32| self.data[c * plane + (yy * self.width + xx) as usize] as f64;
        (0..self.channels as usize)
            .map(|c| {
                let top = at(c, y0, x0) * (1.0 - fx) + at(c, y0, x1) * fx;
                let bottom = at(c, y1, x0) * (1.0 - fx) + at(c, y1, x1) * fx;
                top * (1.0 - fy) + bottom * fy
            })
            .collect()
    }

    /// Little-endian `f32` payload, channel-major.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_payload(channels: u32, height: u32, width: u32, bytes: &[u8]) -> Result<Self, BackendError> {
        if bytes.len() % 4 != 0 {
            return Err(BackendError::Protocol("feature payload length is not a multiple of 4".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(channels, height, width, data)
    }
}

/// A promptable segmenter bound to a single image.
///
/// Calls take `&mut self`, so a provider is used by one caller at a time.
pub trait Segmenter {
    /// `(height, width)` of the bound image.
    fn size(&self) -> (u32, u32);

    /// One triple per prompt, in prompt order.
    fn segment(&mut self, prompts: &[PointPrompt]) -> Result<Vec<MaskTriple>, BackendError>;

    /// Image features, or `None` when the provider has none.
    fn embed(&mut self) -> Result<Option<FeatureGrid>, BackendError>;
}

/// Validates prompts, calls the provider and checks the returned triples.
pub fn segment(
    provider: &mut dyn Segmenter,
    prompts: &[PointPrompt],
) -> Result<Vec<MaskTriple>, BackendError> {
    let (height, width) = provider.size();
    if let Some(p) = prompts.iter().find(|p| !p.in_bounds(height, width)) {
        return Err(BackendError::OutOfBounds { id: p.id, row: p.row, col: p.col, height, width });
    }
    let triples = provider.segment(prompts)?;
    if triples.len() != prompts.len() {
        return Err(BackendError::Misaligned { expected: prompts.len(), got: triples.len() });
    }
    for (p, t) in prompts.iter().zip(&triples) {
        if t.prompt_id != p.id {
            return Err(BackendError::Protocol(format!(
                "triple for prompt {} answered prompt {}",
                p.id, t.prompt_id
            )));
        }
        if !t.is_area_ordered() {
            return Err(BackendError::Prompt {
                prompt_id: p.id,
                message: "levels are not ordered by area".into(),
            });
        }
        if t.levels().iter().any(|m| m.mask.height() != height || m.mask.width() != width) {
            return Err(BackendError::Prompt {
                prompt_id: p.id,
                message: "mask size differs from image".into(),
            });
        }
    }
    Ok(triples)
}

/// Wraps a provider and remembers its answer for every prompt location,
/// so repeated runs over one image query the provider once per point.
pub struct Memoized<S> {
    inner: S,
    answers: HashMap<(u64, u64), MaskTriple>,
    features: Option<Option<FeatureGrid>>,
}

impl<S: Segmenter> Memoized<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, answers: HashMap::new(), features: None }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

pub(crate) fn rebind(triple: &MaskTriple, id: u32) -> MaskTriple {
    let mut t = triple.clone();
    t.prompt_id = id;
    for m in [&mut t.object, &mut t.part, &mut t.subpart] {
        m.prompt_id = Some(id);
    }
    t
}

impl<S: Segmenter> Segmenter for Memoized<S> {
    fn size(&self) -> (u32, u32) {
        self.inner.size()
    }

    fn segment(&mut self, prompts: &[PointPrompt]) -> Result<Vec<MaskTriple>, BackendError> {
        let key = |p: &PointPrompt| (p.row.to_bits(), p.col.to_bits());
        let missing: Vec<PointPrompt> = prompts.iter().filter(|p| !self.answers.contains_key(&key(p))).copied().collect();
        if !missing.is_empty() {
            let fresh = self.inner.segment(&missing)?;
            if fresh.len() != missing.len() {
                return Err(BackendError::Misaligned { expected: missing.len(), got: fresh.len() });
            }
            for (p, t) in missing.iter().zip(fresh) {
                self.answers.insert(key(p), t);
            }
        }
        Ok(prompts.iter().map(|p| rebind(&self.answers[&key(p)], p.id)).collect())
    }

    fn embed(&mut self) -> Result<Option<FeatureGrid>, BackendError> {
        if self.features.is_none() {
            self.features = Some(self.inner.embed()?);
        }
        Ok(self.features.clone().flatten())
    }
}

/// Per-level entry of a triple record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: Level,
    pub rle: RleRecord,
    pub score: f64,
}

/// One prompt's response as stored in `masks_<n>.ndjson` and sent over the
/// wire protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub prompt_id: u32,
    pub point: [f64; 2],
    pub levels: Vec<LevelRecord>,
}

impl TripleRecord {
    pub fn from_triple(triple: &MaskTriple, prompt: &PointPrompt) -> Self {
        Self {
            prompt_id: triple.prompt_id,
            point: [prompt.row, prompt.col],
            levels: triple
                .levels()
                .iter()
                .map(|m| LevelRecord {
                    level: m.level,
                    rle: RleRecord::from(&m.mask),
                    score: m.score(),
                })
                .collect(),
        }
    }

    /// Rebuilds the triple; levels are re-sorted by area.
    pub fn to_triple(&self) -> Result<MaskTriple, BackendError> {
        if self.levels.len() != 3 {
            return Err(BackendError::Protocol(format!(
                "prompt {} has {} levels, expected 3",
                self.prompt_id,
                self.levels.len()
            )));
        }
        let mut decoded = Vec::with_capacity(3);
        for want in [Level::Object, Level::Part, Level::Subpart] {
            let rec = self.levels.iter().find(|l| l.level == want).ok_or_else(|| {
                BackendError::Protocol(format!("prompt {} lacks level {want:?}", self.prompt_id))
            })?;
            decoded.push((BinaryMask::try_from(&rec.rle)?, rec.score));
        }
        let arr: [(BinaryMask, f64); 3] = decoded.try_into().expect("three levels");
        Ok(MaskTriple::from_unordered(self.prompt_id, arr)?)
    }

    pub fn prompt(&self) -> PointPrompt {
        PointPrompt::new(self.point[0], self.point[1], self.prompt_id)
    }
}

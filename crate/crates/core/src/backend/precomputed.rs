//! Directory of recorded segmenter answers.
//!
//! Layout:
//! - `image.png`
//! - `meta.json`: `{"height": H, "width": W, "grids": [32, 64]}`
//! - `masks_<n>.ndjson`: one [`TripleRecord`] per grid prompt
//! - `features.bin` (optional): `C, h, w` as little-endian `u32`, then
//!   `C·h·w` little-endian `f32`, channel-major.
//!
//! Replayed prompts are answered with the nearest recorded prompt within
//! `H / 64` pixels; anything farther is a miss.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{grid_prompts, rebind, segment, BackendError, FeatureGrid, MaskTriple, PointPrompt, Segmenter, TripleRecord};
use crate::raster::ColorImage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub height: u32,
    pub width: u32,
    pub grids: Vec<u32>,
}

pub fn write_features(path: &Path, grid: &FeatureGrid) -> Result<(), BackendError> {
    let mut out = BufWriter::new(File::create(path)?);
    for v in [grid.channels, grid.height, grid.width] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&grid.payload_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureGrid, BackendError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(BackendError::Protocol("features.bin header truncated".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (c, h, w) = (word(0), word(4), word(8));
    let expected = 12 + 4 * (c as usize) * (h as usize) * (w as usize);
    if bytes.len() != expected {
        return Err(BackendError::Protocol(format!(
            "features.bin is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    FeatureGrid::from_payload(c, h, w, &bytes[12..])
}

/// Queries `provider` on each grid and writes the directory layout.
pub fn record(
    provider: &mut dyn Segmenter,
    image: &ColorImage,
    grids: &[u32],
    dir: &Path,
) -> Result<(), BackendError> {
    fs::create_dir_all(dir)?;
    let (height, width) = provider.size();
    image.save_png(&dir.join("image.png"))?;
    let meta = Meta { height, width, grids: grids.to_vec() };
    fs::write(dir.join("meta.json"), serde_json::to_string(&meta)?)?;
    for &n in grids {
        let prompts = grid_prompts(height, width, n);
        let triples = segment(provider, &prompts)?;
        let mut out = BufWriter::new(File::create(dir.join(format!("masks_{n}.ndjson")))?);
        for (p, t) in prompts.iter().zip(&triples) {
            serde_json::to_writer(&mut out, &TripleRecord::from_triple(t, p))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    if let Some(grid) = provider.embed()? {
        write_features(&dir.join("features.bin"), &grid)?;
    }
    Ok(())
}

pub struct PrecomputedProvider {
    meta: Meta,
    image: ColorImage,
    records: Vec<(PointPrompt, MaskTriple)>,
    features: Option<FeatureGrid>,
}

impl PrecomputedProvider {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let image = ColorImage::load(&dir.join("image.png"))?;
        if image.height() != meta.height || image.width() != meta.width {
            return Err(BackendError::Protocol("image.png does not match meta.json".into()));
        }
        let mut records = Vec::new();
        for &n in &meta.grids {
            let file = File::open(dir.join(format!("masks_{n}.ndjson")))?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: TripleRecord = serde_json::from_str(&line)?;
                let triple = rec.to_triple()?;
                records.push((rec.prompt(), triple));
            }
        }
        let feature_path = dir.join("features.bin");
        let features = if feature_path.exists() { Some(read_features(&feature_path)?) } else { None };
        Ok(Self { meta, image, records, features })
    }

    pub fn image(&self) -> &ColorImage {
        &self.image
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn radius(&self) -> f64 {
        self.meta.height as f64 / 64.0
    }

    fn lookup(&self, prompt: &PointPrompt) -> Result<MaskTriple, BackendError> {
        let radius = self.radius();
        let mut best: Option<(f64, &MaskTriple)> = None;
        for (p, t) in &self.records {
            let d = ((p.row - prompt.row).powi(2) + (p.col - prompt.col).powi(2)).sqrt();
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, t));
            }
        }
        let (_, triple) = best.ok_or(BackendError::PromptMiss { prompt_id: prompt.id, radius })?;
        Ok(rebind(triple, prompt.id))
    }
}

impl Segmenter for PrecomputedProvider {
    fn size(&self) -> (u32, u32) {
        (self.meta.height, self.meta.width)
    }

    fn segment(&mut self, prompts: &[PointPrompt]) -> Result<Vec<MaskTriple>, BackendError> {
        prompts.iter().map(|p| self.lookup(p)).collect()
    }

    fn embed(&mut self) -> Result<Option<FeatureGrid>, BackendError> {
        Ok(self.features.clone())
    }
}

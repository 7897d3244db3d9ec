//! Graph-based superpixels and the entity-density raster derived from them.

use thiserror::Error;

use crate::mask::{BinaryMask, DisjointSet};
use crate::raster::ColorImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuperpixelError {
    #[error("image must be at least 2x2, got {height}x{width}")]
    Dimension { height: u32, width: u32 },
    #[error("invalid parameter: {0}")]
    Param(&'static str),
    #[error("mask is {mask_h}x{mask_w} but density map is {map_h}x{map_w}")]
    Mismatch { mask_h: u32, mask_w: u32, map_h: u32, map_w: u32 },
    #[error("mask density of an empty mask is undefined")]
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FelzenszwalbParams {
    /// Threshold scale `k`; edge weights are measured in 8-bit intensity units.
    pub scale: f64,
    pub sigma: f64,
    pub min_size: u32,
}

impl FelzenszwalbParams {
    /// `k = 200`, `sigma = 0.8`, and a minimum region of 100 px at a short
    /// side of 512, scaled linearly with the short side below that.
    pub fn for_image(height: u32, width: u32) -> Self {
        let short = height.min(width);
        let min_size = if short >= 512 {
            100
        } else {
            ((100.0 * short as f64 / 512.0).round() as u32).max(1)
        };
        Self { scale: 200.0, sigma: 0.8, min_size }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub area: u64,
    pub centroid: (f64, f64),
    pub mean_color: [f64; 3],
}

/// Label raster partitioning an image into superpixels `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    height: u32,
    width: u32,
    labels: Vec<u32>,
    regions: Vec<Region>,
}

impl SuperpixelMap {
    /// Builds a map from a raw label raster, renumbering labels in
    /// first-pixel order and computing region statistics from `image`.
    pub fn from_labels(image: &ColorImage, raw: &[usize]) -> Self {
        let (h, w) = (image.height(), image.width());
        let mut remap = vec![u32::MAX; raw.iter().copied().max().map_or(0, |m| m + 1)];
        let mut next = 0u32;
        let labels: Vec<u32> = raw
            .iter()
            .map(|&r| {
                if remap[r] == u32::MAX {
                    remap[r] = next;
                    next += 1;
                }
                remap[r]
            })
            .collect();
        let k = next as usize;
        let mut area = vec![0u64; k];
        let mut sums = vec![[0f64; 5]; k];
        for (idx, (&l, px)) in labels.iter().zip(image.pixels()).enumerate() {
            let l = l as usize;
            area[l] += 1;
            let s = &mut sums[l];
            s[0] += (idx / w as usize) as f64;
            s[1] += (idx % w as usize) as f64;
            s[2] += px[0] as f64;
            s[3] += px[1] as f64;
            s[4] += px[2] as f64;
        }
        let regions = area
            .iter()
            .zip(&sums)
            .map(|(&a, s)| {
                let n = a as f64;
                Region {
                    area: a,
                    centroid: (s[0] / n, s[1] / n),
                    mean_color: [s[2] / n, s[3] / n, s[4] / n],
                }
            })
            .collect();
        Self { height: h, width: w, labels, regions }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn label_at(&self, row: u32, col: u32) -> u32 {
        self.labels[row as usize * self.width as usize + col as usize]
    }

    /// Centroid of a region rounded to the nearest pixel.
    pub fn centroid_pixel(&self, label: usize) -> (u32, u32) {
        let (r, c) = self.regions[label].centroid;
        (
            (r.round() as u32).min(self.height - 1),
            (c.round() as u32).min(self.width - 1),
        )
    }

    pub fn region_mask(&self, label: u32) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.label_at(r, c) == label)
            .expect("map dimensions are positive")
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let sigma = sigma.max(0.01);
    let radius = (sigma * 4.0).ceil() as usize + 1;
    let mut kernel: Vec<f64> = (0..radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = 2.0 * kernel.iter().sum::<f64>() - kernel[0];
    kernel.iter_mut().for_each(|v| *v /= sum);
    kernel
}

/// Separable Gaussian smoothing with clamped borders.
fn smooth(image: &ColorImage, sigma: f64) -> Vec<[f64; 3]> {
    let h = image.height() as usize;
    let w = image.width() as usize;
    let src: Vec<[f64; 3]> = image.pixels().iter().map(|p| p.map(|v| v as f64)).collect();
    if sigma <= 0.0 {
        return src;
    }
    let kernel = gaussian_kernel(sigma);
    let mut tmp = vec![[0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (i, &kv) in kernel.iter().enumerate() {
                let l = x.saturating_sub(i);
                let r = (x + i).min(w - 1);
                for ch in 0..3 {
                    acc[ch] += kv * src[y * w + l][ch];
                    if i > 0 {
                        acc[ch] += kv * src[y * w + r][ch];
                    }
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![[0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (i, &kv) in kernel.iter().enumerate() {
                let u = y.saturating_sub(i);
                let d = (y + i).min(h - 1);
                for ch in 0..3 {
                    acc[ch] += kv * tmp[u * w + x][ch];
                    if i > 0 {
                        acc[ch] += kv * tmp[d * w + x][ch];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct Edge {
    a: usize,
    b: usize,
    weight: f64,
}

/// Felzenszwalb–Huttenlocher segmentation on an 8-connected pixel grid.
pub fn felzenszwalb(
    image: &ColorImage,
    params: &FelzenszwalbParams,
) -> Result<SuperpixelMap, SuperpixelError> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if h < 2 || w < 2 {
        return Err(SuperpixelError::Dimension { height: image.height(), width: image.width() });
    }
    if !(params.scale > 0.0) {
        return Err(SuperpixelError::Param("scale must be positive"));
    }
    if !(params.sigma >= 0.0) {
        return Err(SuperpixelError::Param("sigma must be non-negative"));
    }
    if params.min_size < 1 {
        return Err(SuperpixelError::Param("min_size must be at least 1"));
    }

    let smoothed = smooth(image, params.sigma);
    let diff = |a: usize, b: usize| -> f64 {
        let (p, q) = (smoothed[a], smoothed[b]);
        let d2: f64 = (0..3).map(|c| (p[c] - q[c]).powi(2)).sum();
        d2.sqrt() * 255.0
    };

    let mut edges = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push(Edge { a: i, b: i + 1, weight: diff(i, i + 1) });
            }
            if y + 1 < h {
                edges.push(Edge { a: i, b: i + w, weight: diff(i, i + w) });
            }
            if x + 1 < w && y + 1 < h {
                edges.push(Edge { a: i, b: i + w + 1, weight: diff(i, i + w + 1) });
            }
            if x + 1 < w && y > 0 {
                edges.push(Edge { a: i, b: i - w + 1, weight: diff(i, i - w + 1) });
            }
        }
    }
    // stable: equal weights keep construction order
    edges.sort_by(|p, q| p.weight.total_cmp(&q.weight));

    let n = h * w;
    let mut sets = DisjointSet::new(n);
    let mut size = vec![1u64; n];
    let mut threshold = vec![params.scale; n];
    for e in &edges {
        let ra = sets.find(e.a);
        let rb = sets.find(e.b);
        if ra != rb && e.weight <= threshold[ra] && e.weight <= threshold[rb] {
            let root = sets.union(ra, rb);
            size[root] = size[ra] + size[rb];
            threshold[root] = e.weight + params.scale / size[root] as f64;
        }
    }
    let min = params.min_size as u64;
    for e in &edges {
        let ra = sets.find(e.a);
        let rb = sets.find(e.b);
        if ra != rb && (size[ra] < min || size[rb] < min) {
            let root = sets.union(ra, rb);
            size[root] = size[ra] + size[rb];
        }
    }
    let raw: Vec<usize> = (0..n).map(|i| sets.find(i)).collect();
    Ok(SuperpixelMap::from_labels(image, &raw))
}

/// Per-pixel entity density, constant on each superpixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: u32,
    width: u32,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn uniform(height: u32, width: u32, value: f64) -> Self {
        Self { height, width, values: vec![value; height as usize * width as usize] }
    }

    pub fn from_values(height: u32, width: u32, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height as usize * width as usize);
        Self { height, width, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: u32, col: u32) -> f64 {
        self.values[row as usize * self.width as usize + col as usize]
    }
}

/// Superpixel weight `1 / (1 + A_k / mean(A))`: smaller superpixels mark
/// denser regions.
pub fn density_map(sp: &SuperpixelMap) -> DensityMap {
    let k = sp.len() as f64;
    let mean_area = sp.regions.iter().map(|r| r.area as f64).sum::<f64>() / k;
    let weights: Vec<f64> =
        sp.regions.iter().map(|r| 1.0 / (1.0 + r.area as f64 / mean_area)).collect();
    DensityMap {
        height: sp.height,
        width: sp.width,
        values: sp.labels.iter().map(|&l| weights[l as usize]).collect(),
    }
}

/// Mean density over the mask's foreground pixels.
pub fn mask_density(density: &DensityMap, mask: &BinaryMask) -> Result<f64, SuperpixelError> {
    if mask.height() != density.height || mask.width() != density.width {
        return Err(SuperpixelError::Mismatch {
            mask_h: mask.height(),
            mask_w: mask.width(),
            map_h: density.height,
            map_w: density.width,
        });
    }
    if mask.is_empty() {
        return Err(SuperpixelError::EmptyMask);
    }
    let sum: f64 = mask
        .spans()
        .map(|(s, e)| density.values[s as usize..e as usize].iter().sum::<f64>())
        .sum();
    Ok(sum / mask.area() as f64)
}

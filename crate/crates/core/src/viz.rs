//! Overlay and label renderings of entity maps.

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::entity::EntityMap;
use crate::raster::ColorImage;
use crate::superpixel::SuperpixelMap;
use crate::{Error, Result};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color of mask `index`: hue advanced by the golden ratio per index.
pub fn palette(index: usize) -> [u8; 3] {
    let [r, g, b] = hsv(index as f64 * GOLDEN, 0.75, 0.95);
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

fn owners(map: &EntityMap) -> Vec<u32> {
    let w = map.width() as usize;
    let mut owner = vec![0u32; map.height() as usize * w];
    for (i, m) in map.masks().iter().enumerate() {
        for (r, c0, c1) in m.mask.row_segments() {
            let base = r as usize * w;
            owner[base + c0 as usize..base + c1 as usize].fill(i as u32 + 1);
        }
    }
    owner
}

/// Blends each mask's color at half opacity over the image and strokes
/// mask boundaries in full color.
pub fn overlay(image: &ColorImage, map: &EntityMap) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    if (map.height(), map.width()) != (h, w) {
        return Err(Error::Validation(format!(
            "entity map is {}x{} but image is {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    let owner = owners(map);
    let base = image.to_rgb8();
    let at = |r: u32, c: u32| owner[(r * w + c) as usize];
    Ok(ImageBuffer::from_fn(w, h, |c, r| {
        let px = *base.get_pixel(c, r);
        let o = at(r, c);
        if o == 0 {
            return px;
        }
        let color = palette(o as usize - 1);
        let edge = (r == 0 || at(r - 1, c) != o)
            || (r + 1 == h || at(r + 1, c) != o)
            || (c == 0 || at(r, c - 1) != o)
            || (c + 1 == w || at(r, c + 1) != o);
        if edge {
            return Rgb(color);
        }
        Rgb([0, 1, 2].map(|k| ((px[k] as u16 + color[k] as u16 + 1) / 2) as u8))
    }))
}

/// 16-bit label raster: 0 for background, `i + 1` for mask `i`.
pub fn label_image(map: &EntityMap) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let owner = owners(map);
    ImageBuffer::from_fn(map.width(), map.height(), |c, r| {
        Luma([owner[(r * map.width() + c) as usize].min(u16::MAX as u32) as u16])
    })
}

/// Superpixels painted with their mean colors.
pub fn superpixel_image(sp: &SuperpixelMap) -> RgbImage {
    ImageBuffer::from_fn(sp.width(), sp.height(), |c, r| {
        let m = sp.regions()[sp.label_at(r, c) as usize].mean_color;
        Rgb(m.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

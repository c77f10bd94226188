//! Hexcone RGB ↔ HSV.

use crate::renderer::RasterImage;

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv_pixel(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let s = if max > 0.0 { chroma / max } else { 0.0 };
    if chroma == 0.0 {
        return (0.0, s, max);
    }
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let h = (sector * 60.0).rem_euclid(360.0);
    (h, s, max)
}

pub fn hsv_to_rgb_pixel(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    width: u32,
    height: u32,
    pixels: Vec<(f64, f64, f64)>,
}

impl HsvImage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> (f64, f64, f64) {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn pixels(&self) -> &[(f64, f64, f64)] {
        &self.pixels
    }
}

pub fn rgb_to_hsv(image: &RasterImage) -> HsvImage {
    HsvImage {
        width: image.width(),
        height: image.height(),
        pixels: image
            .as_raw()
            .chunks_exact(3)
            .map(|p| rgb_to_hsv_pixel([p[0], p[1], p[2]]))
            .collect(),
    }
}

pub fn hsv_to_rgb(image: &HsvImage) -> RasterImage {
    let raw = image
        .pixels
        .iter()
        .flat_map(|&(h, s, v)| hsv_to_rgb_pixel(h, s, v))
        .collect();
    RasterImage::from_raw(image.width, image.height, raw).expect("sizes agree")
}

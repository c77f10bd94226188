//! Gaussian smoothing and flat-field correction against a baseline frame.

use crate::error::{Error, Result};
use crate::imaging::color::rgb_to_hsv_pixel;
use crate::renderer::RasterImage;

/// Smoothing scale of the illumination estimate, pixels.
pub const ILLUMINATION_SIGMA: f64 = 12.0;

/// Baseline pixels count as background when their saturation is below this.
const BACKGROUND_MAX_SATURATION: f64 = 0.1;
/// ... and their value above this.
const BACKGROUND_MIN_VALUE: f64 = 0.25;

/// Normalised 1D gaussian taps, radius `ceil(4σ)`. `σ = 0` gives `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable convolution of one plane with replicate borders.
fn blur_plane(data: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let r = kernel.len() / 2;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    let mut padded = vec![0.0; width + 2 * r];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        padded[..r].fill(row[0]);
        padded[r..r + width].copy_from_slice(row);
        padded[r + width..].fill(row[width - 1]);
        for (x, t) in tmp[y * width..(y + 1) * width].iter_mut().enumerate() {
            *t = kernel
                .iter()
                .zip(&padded[x..x + kernel.len()])
                .map(|(w, v)| w * v)
                .sum();
        }
    }
    let r = r as i64;
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for (k, w) in kernel.iter().enumerate() {
            let src = clamp(y as i64 + k as i64 - r, height) * width;
            let (dst, s) = (&mut out[y * width..(y + 1) * width], &tmp[src..src + width]);
            for (d, v) in dst.iter_mut().zip(s) {
                *d += w * v;
            }
        }
    }
    out
}

fn planes(image: &RasterImage) -> [Vec<f64>; 3] {
    let raw = image.as_raw();
    [0, 1, 2].map(|c| raw.iter().skip(c).step_by(3).map(|&v| v as f64).collect())
}

fn blurred_planes(image: &RasterImage, sigma: f64) -> [Vec<f64>; 3] {
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (image.width() as usize, image.height() as usize);
    planes(image).map(|p| blur_plane(&p, w, h, &kernel))
}

fn to_raster(width: u32, height: u32, planes: &[Vec<f64>; 3]) -> RasterImage {
    let raw = (0..planes[0].len())
        .flat_map(|i| {
            planes
                .iter()
                .map(move |p| p[i].round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    RasterImage::from_raw(width, height, raw).expect("sizes agree")
}

/// Gaussian blur with replicate borders; `sigma = 0` is the identity.
pub fn gaussian_blur(image: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("blur sigma must be >= 0"));
    }
    Ok(to_raster(
        image.width(),
        image.height(),
        &blurred_planes(image, sigma),
    ))
}

/// Illumination map estimated from a marker-free view of the background.
///
/// The blurred baseline's brightest channel is averaged over background
/// pixels only (normalised convolution), so markers do not leave holes in
/// the map. Frames are divided by it and rescaled to full white.
#[derive(Debug, Clone)]
pub struct FlatField {
    width: u32,
    height: u32,
    blur_sigma: f64,
    illumination: Vec<f64>,
}

impl FlatField {
    pub fn from_baseline(baseline: &RasterImage, blur_sigma: f64) -> Result<Self> {
        if !(blur_sigma >= 0.0 && blur_sigma.is_finite()) {
            return Err(Error::invalid("blur sigma must be >= 0"));
        }
        let (w, h) = (baseline.width() as usize, baseline.height() as usize);
        let blurred = blurred_planes(baseline, blur_sigma);
        let mut weight = vec![0.0; w * h];
        let mut signal = vec![0.0; w * h];
        for i in 0..w * h {
            let px = [0, 1, 2].map(|c| blurred[c][i].round().clamp(0.0, 255.0) as u8);
            let (_, s, v) = rgb_to_hsv_pixel(px);
            if s < BACKGROUND_MAX_SATURATION && v > BACKGROUND_MIN_VALUE {
                weight[i] = 1.0;
                signal[i] = blurred[0][i].max(blurred[1][i]).max(blurred[2][i]);
            }
        }
        let kernel = gaussian_kernel(ILLUMINATION_SIGMA);
        let num = blur_plane(&signal, w, h, &kernel);
        let den = blur_plane(&weight, w, h, &kernel);
        // pixels that are dark in the baseline lie outside the lens circle
        let dark = BACKGROUND_MIN_VALUE * 255.0;
        let illumination = (0..w * h)
            .map(|i| {
                let peak = blurred[0][i].max(blurred[1][i]).max(blurred[2][i]);
                if den[i] > 1e-3 && peak > dark {
                    num[i] / den[i]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            width: baseline.width(),
            height: baseline.height(),
            blur_sigma,
            illumination,
        })
    }

    pub fn illumination(&self, x: u32, y: u32) -> f64 {
        self.illumination[y as usize * self.width as usize + x as usize]
    }

    /// Blurs `frame` and divides out the illumination. Pixels with almost no
    /// light (outside the lens circle) come out black.
    pub fn apply(&self, frame: &RasterImage) -> Result<RasterImage> {
        if frame.width() != self.width || frame.height() != self.height {
            return Err(Error::invalid(format!(
                "frame is {}x{} but the baseline is {}x{}",
                frame.width(),
                frame.height(),
                self.width,
                self.height
            )));
        }
        let mut p = blurred_planes(frame, self.blur_sigma);
        for plane in p.iter_mut() {
            for (v, l) in plane.iter_mut().zip(&self.illumination) {
                *v = if *l >= 8.0 { *v * 255.0 / l } else { 0.0 };
            }
        }
        Ok(to_raster(self.width, self.height, &p))
    }
}

/// Blur plus flat-field correction of `frame` against `baseline`.
pub fn preprocess(
    frame: &RasterImage,
    baseline: &RasterImage,
    blur_sigma: f64,
) -> Result<RasterImage> {
    if !frame.same_size(baseline) {
        return Err(Error::invalid("frame and baseline dimensions differ"));
    }
    FlatField::from_baseline(baseline, blur_sigma)?.apply(frame)
}

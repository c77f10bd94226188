//! Hue-band segmentation of cyan markers and sub-image extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::color::HsvImage;
use crate::renderer::{CameraModel, RasterImage};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentParams {
    /// Hue band `[hue_low, hue_high)`, degrees.
    pub hue_low: f64,
    /// Sits halfway between the most compressed mixed colour and magenta,
    /// so blends along a sheared magenta crescent split evenly.
    pub hue_high: f64,
    pub min_saturation: f64,
    pub min_blob_px: usize,
    /// Side of the square sub-image, odd.
    pub window: usize,
    /// Weight centroid pixels by red absorption instead of counting them.
    pub weighted_centroid: bool,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            hue_low: 150.0,
            hue_high: 280.0,
            min_saturation: 0.2,
            min_blob_px: 16,
            window: 21,
            weighted_centroid: true,
        }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.hue_low && self.hue_low < self.hue_high && self.hue_high <= 360.0) {
            return Err(Error::invalid(
                "hue band must satisfy 0 <= low < high <= 360",
            ));
        }
        if !(0.0..=1.0).contains(&self.min_saturation) {
            return Err(Error::invalid("min_saturation must be in [0, 1]"));
        }
        if self.min_blob_px == 0 {
            return Err(Error::invalid("min_blob_px must be >= 1"));
        }
        if self.window % 2 == 0 {
            return Err(Error::invalid("sub-image window must be odd"));
        }
        Ok(())
    }
}

/// Square RGB window around a marker, row-major, zero outside the frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubImage {
    size: usize,
    data: Vec<u8>,
}

impl SubImage {
    pub fn cut(frame: &RasterImage, center: [i64; 2], size: usize) -> Self {
        let half = (size / 2) as i64;
        let mut data = vec![0u8; size * size * 3];
        for j in 0..size as i64 {
            let y = center[1] - half + j;
            if y < 0 || y >= frame.height() as i64 {
                continue;
            }
            for i in 0..size as i64 {
                let x = center[0] - half + i;
                if x < 0 || x >= frame.width() as i64 {
                    continue;
                }
                let k = 3 * (j as usize * size + i as usize);
                data[k..k + 3].copy_from_slice(&frame.get(x as u32, y as u32));
            }
        }
        Self { size, data }
    }

    /// Window resampled on the plane tangent to the view ray through
    /// `center`, one on-axis pixel per sample. Rows run along the image
    /// radial direction, so every marker is seen as if it sat on the optical
    /// axis. Falls back to [`SubImage::cut`] outside the field of view.
    pub fn rectified(
        frame: &RasterImage,
        camera: &CameraModel,
        center: [f64; 2],
        size: usize,
    ) -> Self {
        let Some(ray) = camera.unproject(center[0], center[1]) else {
            return Self::cut(
                frame,
                [center[0].round() as i64, center[1].round() as i64],
                size,
            );
        };
        let [cx, cy] = camera.principal_point;
        let (dx, dy) = (center[0] - cx, center[1] - cy);
        let r = dx.hypot(dy);
        let (cos_p, sin_p) = if r > 1e-9 {
            (dx / r, dy / r)
        } else {
            (1.0, 0.0)
        };
        let cos_t = ray.z;
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let radial = Vec3::new(cos_t * cos_p, cos_t * sin_p, -sin_t) / camera.focal_scale;
        let azimuthal = Vec3::new(-sin_p, cos_p, 0.0) / camera.focal_scale;
        let half = (size / 2) as f64;
        let mut data = vec![0u8; size * size * 3];
        for j in 0..size {
            for i in 0..size {
                let dir = ray + radial * (i as f64 - half) + azimuthal * (j as f64 - half);
                let Ok([u, v]) = camera.project(&dir) else {
                    continue;
                };
                let k = 3 * (j * size + i);
                data[k..k + 3].copy_from_slice(&bilinear(frame, u, v));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Bilinear sample at pixel coordinates, black outside the frame.
fn bilinear(frame: &RasterImage, u: f64, v: f64) -> [u8; 3] {
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let mut acc = [0.0; 3];
    for (ox, oy, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (x, y) = (x0 as i64 + ox, y0 as i64 + oy);
        if x < 0 || y < 0 || x >= w || y >= h {
            continue;
        }
        let p = frame.get(x as u32, y as u32);
        for c in 0..3 {
            acc[c] += wt * p[c] as f64;
        }
    }
    acc.map(|a| a.round().clamp(0.0, 255.0) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerObservation {
    /// Pixel coordinates, sub-pixel. With `weighted_centroid`, pixels are
    /// weighted by red absorption, which follows the coverage of the cyan
    /// disk whatever lies behind it.
    pub centroid: [f64; 2],
    pub pixel_count: usize,
    /// Degrees.
    pub mean_hue: f64,
    pub sub_image: SubImage,
}

/// Connected hue-band blobs of `hsv`, with sub-images cut from `frame`.
///
/// Blobs are reported in raster order of their first pixel.
pub fn segment_markers(
    hsv: &HsvImage,
    frame: &RasterImage,
    params: &SegmentParams,
) -> Result<Vec<MarkerObservation>> {
    params.validate()?;
    if hsv.width() != frame.width() || hsv.height() != frame.height() {
        return Err(Error::invalid("hsv and rgb frames differ in size"));
    }
    let (w, h) = (hsv.width() as usize, hsv.height() as usize);
    let mut mask: Vec<bool> = hsv
        .pixels()
        .iter()
        .map(|&(hue, s, _)| {
            s >= params.min_saturation && hue >= params.hue_low && hue < params.hue_high
        })
        .collect();

    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] {
            continue;
        }
        mask[start] = false;
        stack.push(start);
        let (mut n, mut sw, mut sx, mut sy, mut shue) = (0usize, 0.0, 0.0, 0.0, 0.0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            n += 1;
            let wt = if params.weighted_centroid {
                255.0 - frame.get(x as u32, y as u32)[0] as f64 + 1e-3
            } else {
                1.0
            };
            sw += wt;
            sx += wt * x as f64;
            sy += wt * y as f64;
            shue += hsv.pixels()[p].0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] {
                        mask[q] = false;
                        stack.push(q);
                    }
                }
            }
        }
        if n < params.min_blob_px {
            continue;
        }
        let centroid = [sx / sw, sy / sw];
        let center = [centroid[0].round() as i64, centroid[1].round() as i64];
        out.push(MarkerObservation {
            centroid,
            pixel_count: n,
            mean_hue: shue / n as f64,
            sub_image: SubImage::cut(frame, center, params.window),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::color::rgb_to_hsv;

    fn disks(w: u32, h: u32, disks: &[([f64; 2], f64)]) -> RasterImage {
        let mut img = RasterImage::filled(w, h, [255, 255, 255]);
        for y in 0..h {
            for x in 0..w {
                let inside = disks
                    .iter()
                    .any(|(c, r)| (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) <= r * r);
                if inside {
                    img.put(x, y, [0, 255, 255]);
                }
            }
        }
        img
    }

    fn run(img: &RasterImage) -> Vec<MarkerObservation> {
        segment_markers(&rgb_to_hsv(img), img, &SegmentParams::default()).unwrap()
    }

    #[test]
    fn single_disk_centroid() {
        let obs = run(&disks(120, 120, &[([50.0, 60.0], 10.0)]));
        assert_eq!(obs.len(), 1);
        let c = obs[0].centroid;
        assert!(
            (c[0] - 50.0).abs() < 0.1 && (c[1] - 60.0).abs() < 0.1,
            "{c:?}"
        );
        assert!((obs[0].mean_hue - 180.0).abs() < 1e-9);
        assert_eq!(obs[0].sub_image.size(), 21);
        // window centre holds the marker colour
        let k = 3 * (10 * 21 + 10);
        assert_eq!(&obs[0].sub_image.data()[k..k + 3], &[0, 255, 255]);
    }

    #[test]
    fn centroid_follows_cyan_past_a_blue_fringe() {
        // blue pixels (cyan over magenta) spill past the cyan disk on one side
        let mut img = disks(120, 120, &[([50.0, 60.0], 10.0)]);
        for y in 50..=70 {
            img.put(61, y, [230, 190, 255]);
        }
        let obs = run(&img);
        assert_eq!(obs.len(), 1);
        assert!(obs[0].pixel_count > 317);
        assert!(
            (obs[0].centroid[0] - 50.0).abs() < 0.1,
            "{:?}",
            obs[0].centroid
        );
        let counted = SegmentParams {
            weighted_centroid: false,
            ..SegmentParams::default()
        };
        let plain = segment_markers(&rgb_to_hsv(&img), &img, &counted).unwrap();
        assert!(plain[0].centroid[0] - 50.0 > 0.6, "{:?}", plain[0].centroid);
    }

    #[test]
    fn two_disks_and_blank() {
        assert_eq!(
            run(&disks(
                120,
                120,
                &[([30.0, 30.0], 8.0), ([80.0, 80.0], 8.0)]
            ))
            .len(),
            2
        );
        assert!(run(&RasterImage::filled(50, 50, [255, 255, 255])).is_empty());
    }

    #[test]
    fn small_blobs_dropped_and_diagonal_connects() {
        let mut img = RasterImage::filled(30, 30, [255, 255, 255]);
        for i in 0..20 {
            img.put(5 + i, 5 + i, [0, 0, 255]);
        }
        img.put(25, 2, [0, 0, 255]);
        let obs = run(&img);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].pixel_count, 20);
    }

    #[test]
    fn window_zero_padded_at_border() {
        let obs = run(&disks(40, 40, &[([2.0, 2.0], 5.0)]));
        assert_eq!(obs.len(), 1);
        assert_eq!(&obs[0].sub_image.data()[..3], &[0, 0, 0]);
    }

    #[test]
    fn magenta_is_outside_band() {
        assert!(run(&disks(40, 40, &[([20.0, 20.0], 6.0)]).clone()).len() == 1);
        let mut img = RasterImage::filled(40, 40, [255, 255, 255]);
        for y in 15..25 {
            for x in 15..25 {
                img.put(x, y, [230, 64, 217]);
            }
        }
        assert!(run(&img).is_empty());
    }

    /// Pixels whose view ray lies within `half_angle` of `axis`.
    fn cone(camera: &CameraModel, axis: Vec3, half_angle: f64) -> RasterImage {
        let mut img = RasterImage::filled(camera.width, camera.height, [255, 255, 255]);
        let axis = axis.normalize();
        for y in 0..camera.height {
            for x in 0..camera.width {
                if let Some(ray) = camera.unproject(x as f64, y as f64) {
                    if ray.dot(&axis).clamp(-1.0, 1.0).acos() <= half_angle {
                        img.put(x, y, [0, 255, 255]);
                    }
                }
            }
        }
        img
    }

    fn extents(sub: &SubImage) -> (usize, usize) {
        let n = sub.size();
        let marked = |i: usize, j: usize| sub.data()[3 * (j * n + i)] < 128;
        let row = (0..n).filter(|&i| marked(i, n / 2)).count();
        let col = (0..n).filter(|&j| marked(n / 2, j)).count();
        (row, col)
    }

    #[test]
    fn rectified_window_undoes_fisheye_squash() {
        let camera = CameraModel {
            width: 200,
            height: 200,
            focal_scale: 70.0,
            principal_point: [100.0, 100.0],
            max_field_angle_deg: 89.0,
        };
        let theta = 75f64.to_radians();
        let axis = Vec3::new(theta.sin() * 0.6, theta.sin() * 0.8, theta.cos());
        let img = cone(&camera, axis, 0.1);
        let obs = run(&img);
        assert_eq!(obs.len(), 1);
        let plain = SubImage::cut(&img, obs[0].centroid.map(|c| c.round() as i64), 21);
        let rect = SubImage::rectified(&img, &camera, obs[0].centroid, 21);
        // radially squashed in the raw frame, round after rectification
        let (r, c) = extents(&rect);
        assert!(r.abs_diff(c) <= 1, "rectified extents {r} x {c}");
        assert!((r as f64 - 2.0 * 0.1 * 70.0).abs() <= 2.0, "{r}");
        let diag = |s: &SubImage| {
            let n = s.size();
            (0..n).filter(|&k| s.data()[3 * (k * n + k)] < 128).count()
        };
        assert_ne!(diag(&plain), diag(&rect));
    }

    #[test]
    fn rectified_window_on_axis_matches_plain_cut() {
        let camera = CameraModel {
            width: 120,
            height: 120,
            focal_scale: 40.0,
            principal_point: [60.0, 60.0],
            max_field_angle_deg: 89.0,
        };
        let img = disks(120, 120, &[([60.0, 60.0], 5.0)]);
        let plain = SubImage::cut(&img, [60, 60], 21);
        let rect = SubImage::rectified(&img, &camera, [60.0, 60.0], 21);
        // identical away from the rim, where sub-pixel resampling shifts the edge
        for j in 0..21usize {
            for i in 0..21usize {
                let d = (i as f64 - 10.0).hypot(j as f64 - 10.0);
                if (d - 5.0).abs() > 1.0 {
                    let k = 3 * (j * 21 + i);
                    assert_eq!(plain.data()[k..k + 3], rect.data()[k..k + 3], "({i},{j})");
                }
            }
        }
    }
}

//! Synthetic camera frames of the two marker layers.
//!
//! Every marker is a flat disk facing the dome centre. Rays from the camera
//! are intersected with the disks exactly; pixels near a marker are
//! supersampled, everything else is shaded once at the pixel centre.

pub mod camera;
pub mod optics;
pub mod raster;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MarkerLayout;
use crate::mechanics::MarkerDisplacement;
use crate::Vec3;

pub use camera::CameraModel;
pub use optics::{OpticalFilterModel, Rgb};
pub use raster::RasterImage;

const TILE: u32 = 16;

/// Lighting, noise and anti-aliasing settings of a render.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    /// `k` of the radial gain `1 − k·ρ²`, ρ relative to the lens circle.
    pub lighting_falloff: f64,
    /// Standard deviation of additive pixel noise, 8-bit counts.
    pub noise_sigma: f64,
    /// Noise seed, set per frame by the caller.
    #[serde(skip)]
    pub seed: u64,
    /// Subsamples per pixel side near markers.
    pub supersampling: u32,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            lighting_falloff: 0.3,
            noise_sigma: 2.0,
            seed: 0,
            supersampling: 4,
        }
    }
}

impl RenderSettings {
    /// Flat lighting, no noise.
    pub fn clean() -> Self {
        Self {
            lighting_falloff: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lighting_falloff) {
            return Err(Error::invalid("lighting_falloff must be in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if !(1..=16).contains(&self.supersampling) {
            return Err(Error::invalid("supersampling must be in 1..=16"));
        }
        Ok(())
    }
}

/// A marker disk in camera space.
#[derive(Debug, Clone, Copy)]
struct Disk {
    center: Vec3,
    normal: Vec3,
    radius_sq: f64,
}

impl Disk {
    fn new(center: Vec3, radius: f64) -> Self {
        Self {
            center,
            normal: center.normalize(),
            radius_sq: radius * radius,
        }
    }

    fn hit(&self, ray: &Vec3) -> bool {
        let denom = self.normal.dot(ray);
        if denom <= 1e-12 {
            return false;
        }
        let t = self.normal.dot(&self.center) / denom;
        (ray * t - self.center).norm_squared() <= self.radius_sq
    }

    /// Pixel bounding box `[x0, y0, x1, y1]` of the projected rim, with a
    /// one pixel margin. `None` when no part of it can be in view.
    fn pixel_bounds(&self, camera: &CameraModel) -> Option<[i64; 4]> {
        let radius = self.radius_sq.sqrt();
        let helper = if self.normal.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let e1 = self.normal.cross(&helper).normalize();
        let e2 = self.normal.cross(&e1);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for k in 0..32 {
            let phi = std::f64::consts::TAU * k as f64 / 32.0;
            let rim = self.center + (e1 * phi.cos() + e2 * phi.sin()) * radius;
            let p = camera.project(&rim).ok()?;
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let x0 = (lo[0].floor() as i64 - 1).max(0);
        let y0 = (lo[1].floor() as i64 - 1).max(0);
        let x1 = (hi[0].ceil() as i64 + 1).min(camera.width as i64 - 1);
        let y1 = (hi[1].ceil() as i64 + 1).min(camera.height as i64 - 1);
        (x0 <= x1 && y0 <= y1).then_some([x0, y0, x1, y1])
    }
}

#[derive(Debug, Clone, Copy)]
struct MarkerPair {
    outer: Disk,
    inner: Disk,
    /// Union of both disks' pixel bounds.
    bounds: [i64; 4],
    /// Magenta filter seen through the cyan one at the current layer gap.
    mixed_magenta: Rgb,
}

/// Displaced outer-marker centres projected to pixels, `None` for markers
/// the camera does not see.
pub fn projected_marker_centers(
    layout: &MarkerLayout,
    displacements: &[MarkerDisplacement],
    camera: &CameraModel,
) -> Result<Vec<Option<[f64; 2]>>> {
    check_lengths(layout, displacements)?;
    layout
        .outer_positions()
        .iter()
        .zip(displacements)
        .map(|(p, d)| {
            let c = p + d.outer;
            if camera.sees(&c) {
                camera.project(&c).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn check_lengths(layout: &MarkerLayout, displacements: &[MarkerDisplacement]) -> Result<()> {
    if layout.len() != displacements.len() {
        return Err(Error::invalid(format!(
            "layout has {} markers but {} displacements were given",
            layout.len(),
            displacements.len()
        )));
    }
    Ok(())
}

/// Renders one frame of the deformed sensor.
///
/// `marker_radius` is the outer (cyan) disk radius; inner disks are scaled so
/// both subtend the same cone at rest.
pub fn render_frame(
    layout: &MarkerLayout,
    displacements: &[MarkerDisplacement],
    marker_radius: f64,
    camera: &CameraModel,
    filters: &OpticalFilterModel,
    settings: &RenderSettings,
) -> Result<RasterImage> {
    check_lengths(layout, displacements)?;
    camera.validate()?;
    filters.validate()?;
    settings.validate()?;
    if !(marker_radius > 0.0) {
        return Err(Error::invalid("marker_radius must be positive"));
    }
    let rest_gap = layout.outer_radius() - layout.inner_radius();
    let inner_radius = marker_radius * layout.inner_radius() / layout.outer_radius();
    let magenta = filters.magenta();

    let (w, h) = (camera.width, camera.height);
    let tiles_x = w.div_ceil(TILE) as usize;
    let tiles_y = h.div_ceil(TILE) as usize;
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut markers = Vec::new();

    for ((po, pi), d) in layout
        .outer_positions()
        .iter()
        .zip(layout.inner_positions())
        .zip(displacements)
    {
        let co = po + d.outer;
        let ci = pi + d.inner;
        if !camera.sees(&co) {
            continue;
        }
        let gap = co.norm() - ci.norm();
        let g = filters.magenta_exponent(gap, rest_gap);
        let outer = Disk::new(co, marker_radius);
        let inner = Disk::new(ci, inner_radius);
        let Some(bounds) = [outer.pixel_bounds(camera), inner.pixel_bounds(camera)]
            .into_iter()
            .flatten()
            .reduce(|a, b| {
                [
                    a[0].min(b[0]),
                    a[1].min(b[1]),
                    a[2].max(b[2]),
                    a[3].max(b[3]),
                ]
            })
        else {
            continue;
        };
        let id = markers.len() as u32;
        markers.push(MarkerPair {
            outer,
            inner,
            bounds,
            mixed_magenta: magenta.map(|t| t.powf(g)),
        });
        let [x0, y0, x1, y1] = bounds;
        for ty in (y0 as u32 / TILE)..=(y1 as u32 / TILE) {
            for tx in (x0 as u32 / TILE)..=(x1 as u32 / TILE) {
                tiles[ty as usize * tiles_x + tx as usize].push(id);
            }
        }
    }

    let background = filters.background();
    let cyan = filters.cyan();
    let circle = camera.image_circle_radius();
    let [cx, cy] = camera.principal_point;
    let ss = settings.supersampling;
    let step = 1.0 / ss as f64;

    let shade = |ray: &Vec3, list: &[u32]| -> Rgb {
        let mut c = background;
        for &id in list {
            let m = &markers[id as usize];
            let out = m.outer.hit(ray);
            let inn = m.inner.hit(ray);
            let f = match (out, inn) {
                (true, true) => [0, 1, 2].map(|k| cyan[k] * m.mixed_magenta[k]),
                (true, false) => cyan,
                (false, true) => magenta,
                (false, false) => continue,
            };
            c = [0, 1, 2].map(|k| c[k] * f[k]);
        }
        c
    };

    let mut pixels = vec![0u8; w as usize * h as usize * 3];
    pixels
        .par_chunks_mut(w as usize * 3)
        .enumerate()
        .for_each(|(y, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(y as u64);
            let tile_row = y / TILE as usize * tiles_x;
            let mut near: Vec<u32> = Vec::new();
            for x in 0..w as usize {
                let (u, v) = (x as f64, y as f64);
                let rho = (u - cx).hypot(v - cy) / circle;
                near.clear();
                near.extend(
                    tiles[tile_row + x / TILE as usize]
                        .iter()
                        .copied()
                        .filter(|&id| {
                            let [x0, y0, x1, y1] = markers[id as usize].bounds;
                            (x0..=x1).contains(&(x as i64)) && (y0..=y1).contains(&(y as i64))
                        }),
                );
                let list = &near[..];
                let color = if rho > 1.0 {
                    [0.0; 3]
                } else if list.is_empty() {
                    background
                } else {
                    let mut acc = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let su = u - 0.5 + (sx as f64 + 0.5) * step;
                            let sv = v - 0.5 + (sy as f64 + 0.5) * step;
                            let c = match camera.unproject(su, sv) {
                                Some(ray) => shade(&ray, list),
                                None => [0.0; 3],
                            };
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    acc.map(|a| a / (ss * ss) as f64)
                };
                let gain = 1.0 - settings.lighting_falloff * rho.min(1.0).powi(2);
                for k in 0..3 {
                    let mut value = color[k] * gain * 255.0;
                    if settings.noise_sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        value += settings.noise_sigma * n;
                    }
                    row[3 * x + k] = value.round().clamp(0.0, 255.0) as u8;
                }
            }
        });
    RasterImage::from_raw(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::color::rgb_to_hsv_pixel;

    fn single(theta_deg: f64) -> MarkerLayout {
        let t = theta_deg.to_radians();
        MarkerLayout::from_outer_positions(
            vec![Vec3::new(21.0 * t.sin(), 0.0, 21.0 * t.cos())],
            19.0,
        )
        .unwrap()
    }

    fn small_camera() -> CameraModel {
        CameraModel {
            width: 200,
            height: 200,
            focal_scale: 70.0,
            principal_point: [99.5, 99.5],
            max_field_angle_deg: 89.0,
        }
    }

    fn render(
        layout: &MarkerLayout,
        d: &[MarkerDisplacement],
        radius: f64,
        settings: &RenderSettings,
    ) -> RasterImage {
        render_frame(
            layout,
            d,
            radius,
            &small_camera(),
            &OpticalFilterModel::default(),
            settings,
        )
        .unwrap()
    }

    fn pixels_where(img: &RasterImage, keep: impl Fn([u8; 3]) -> bool) -> Vec<(f64, f64, [u8; 3])> {
        let mut out = Vec::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = img.get(x, y);
                if keep(p) {
                    out.push((x as f64, y as f64, p));
                }
            }
        }
        out
    }

    fn centroid(px: &[(f64, f64, [u8; 3])]) -> [f64; 2] {
        let n = px.len() as f64;
        [
            px.iter().map(|p| p.0).sum::<f64>() / n,
            px.iter().map(|p| p.1).sum::<f64>() / n,
        ]
    }

    #[test]
    fn deterministic_for_a_seed() {
        let layout = single(30.0);
        let d = [MarkerDisplacement::ZERO];
        let noisy = RenderSettings {
            seed: 7,
            ..RenderSettings::default()
        };
        assert_eq!(
            render(&layout, &d, 1.0, &noisy),
            render(&layout, &d, 1.0, &noisy)
        );
        let other = RenderSettings { seed: 8, ..noisy };
        assert_ne!(
            render(&layout, &d, 1.0, &noisy),
            render(&layout, &d, 1.0, &other)
        );
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = render_frame(
            &single(0.0),
            &[],
            1.0,
            &small_camera(),
            &OpticalFilterModel::default(),
            &RenderSettings::clean(),
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn compression_shifts_hue_toward_blue() {
        let layout = single(0.0);
        let filters = OpticalFilterModel::default();
        let mut hues = Vec::new();
        for squeeze in [0.0, 0.5, 1.0] {
            let d = [MarkerDisplacement {
                outer: Vec3::new(0.0, 0.0, -squeeze),
                inner: Vec3::zeros(),
            }];
            let img = render(&layout, &d, 1.0, &RenderSettings::clean());
            let gap = 2.0 - squeeze;
            let expect = filters
                .compose_marker_color(1.0, gap, 2.0)
                .map(|c| (c * 255.0).round() as u8);
            assert_eq!(img.get(100, 100), expect, "centre colour at gap {gap}");
            let blob = pixels_where(&img, |p| {
                let (h, s, _) = rgb_to_hsv_pixel(p);
                s >= 0.2 && (150.0..280.0).contains(&h)
            });
            let mean =
                blob.iter().map(|p| rgb_to_hsv_pixel(p.2).0).sum::<f64>() / blob.len() as f64;
            hues.push(mean);
        }
        assert!(hues[0] < hues[1] && hues[1] < hues[2], "{hues:?}");
    }

    #[test]
    fn shear_leaves_a_cyan_crescent() {
        let layout = single(20.0);
        let rest = render(
            &layout,
            &[MarkerDisplacement::ZERO],
            2.0,
            &RenderSettings::clean(),
        );
        let sheared = render(
            &layout,
            &[MarkerDisplacement {
                outer: Vec3::new(1.0, 0.0, 0.0),
                inner: Vec3::new(0.25, 0.0, 0.0),
            }],
            2.0,
            &RenderSettings::clean(),
        );
        let cyan_disk = |p: [u8; 3]| p[0] < 128 && p[2] > 100;
        let magenta_disk = |p: [u8; 3]| p[1] < 128 && p[2] > 100;
        let pure_cyan = |p: [u8; 3]| p[0] < 80 && p[1] > 200;
        let shift = |keep: &dyn Fn([u8; 3]) -> bool| {
            let a = centroid(&pixels_where(&rest, keep));
            let b = centroid(&pixels_where(&sheared, keep));
            (b[0] - a[0]).hypot(b[1] - a[1])
        };
        let (cyan, magenta) = (shift(&cyan_disk), shift(&magenta_disk));
        assert!(
            cyan > magenta && magenta > 0.0,
            "cyan {cyan} magenta {magenta}"
        );
        assert!(pixels_where(&rest, pure_cyan).len() < 5);
        assert!(pixels_where(&sheared, pure_cyan).len() > 10);
    }

    #[test]
    fn drawn_area_matches_solid_angle() {
        let cam = small_camera();
        for theta in [0.0, 45.0, 75.0] {
            let img = render(
                &single(theta),
                &[MarkerDisplacement::ZERO],
                2.0,
                &RenderSettings::clean(),
            );
            let drawn = pixels_where(&img, |p| p[0] < 128 && p[2] > 100).len() as f64;
            let omega = std::f64::consts::TAU * (1.0 - 21.0 / (21.0f64.powi(2) + 4.0).sqrt());
            let expect = cam.focal_scale.powi(2) * omega;
            assert!(
                (drawn / expect - 1.0).abs() < 0.05,
                "θ={theta}: {drawn} vs {expect}"
            );
        }
    }

    #[test]
    fn markers_outside_the_view_are_not_drawn() {
        let outside = single(89.5);
        let img = render(
            &outside,
            &[MarkerDisplacement::ZERO],
            1.0,
            &RenderSettings::clean(),
        );
        let empty = MarkerLayout::from_outer_positions(vec![], 19.0);
        let blank = match empty {
            Ok(l) => render(&l, &[], 1.0, &RenderSettings::clean()),
            Err(_) => RasterImage::from_raw(200, 200, {
                let mut b = RasterImage::filled(200, 200, [255; 3]).into_raw();
                for y in 0..200u32 {
                    for x in 0..200u32 {
                        if small_camera().unproject(x as f64, y as f64).is_none() {
                            let i = 3 * (y as usize * 200 + x as usize);
                            b[i..i + 3].fill(0);
                        }
                    }
                }
                b
            })
            .unwrap(),
        };
        assert_eq!(img, blank);
        let centers =
            projected_marker_centers(&outside, &[MarkerDisplacement::ZERO], &small_camera())
                .unwrap();
        assert_eq!(centers, vec![None]);
    }

    #[test]
    fn lighting_darkens_the_rim() {
        let img = render(
            &single(0.0),
            &[MarkerDisplacement::ZERO],
            0.5,
            &RenderSettings {
                lighting_falloff: 0.3,
                noise_sigma: 0.0,
                ..RenderSettings::default()
            },
        );
        assert_eq!(img.get(100, 10)[0] < img.get(100, 60)[0], true);
        assert_eq!(img.get(0, 0), [0, 0, 0]);
    }
}

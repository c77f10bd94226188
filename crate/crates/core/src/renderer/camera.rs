//! Equal-area fisheye camera at the dome centre, looking along +z.
//!
//! A ray at angle θ from the optical axis lands at radius `2f·sin(θ/2)` from
//! the principal point, so image area is proportional to solid angle:
//! `dA = f² dΩ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Pixel centres sit at integer coordinates; pixel `(x, y)` covers
/// `[x − ½, x + ½] × [y − ½, y + ½]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    /// Focal scale `f`, pixels per radian at the image centre.
    pub focal_scale: f64,
    pub principal_point: [f64; 2],
    /// Half of the lens field of view, degrees.
    pub max_field_angle_deg: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width: 800,
            height: 800,
            focal_scale: 275.0,
            principal_point: [399.5, 399.5],
            max_field_angle_deg: 89.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if !(self.focal_scale > 0.0 && self.focal_scale.is_finite()) {
            return Err(Error::invalid("focal_scale must be positive"));
        }
        let [cx, cy] = self.principal_point;
        let inside =
            (0.0..self.width as f64).contains(&cx) && (0.0..self.height as f64).contains(&cy);
        if !inside {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        if !(self.max_field_angle_deg > 0.0 && self.max_field_angle_deg <= 180.0) {
            return Err(Error::invalid("max_field_angle_deg must be in (0, 180]"));
        }
        Ok(())
    }

    pub fn max_field_angle(&self) -> f64 {
        self.max_field_angle_deg.to_radians()
    }

    /// Image radius of the lens circle, pixels.
    pub fn image_circle_radius(&self) -> f64 {
        2.0 * self.focal_scale * (self.max_field_angle() / 2.0).sin()
    }

    /// Whether a direction lies inside the lens field of view.
    pub fn sees(&self, direction: &Vec3) -> bool {
        let n = direction.norm();
        n > 0.0 && (direction.z / n).clamp(-1.0, 1.0).acos() <= self.max_field_angle()
    }

    /// Projects a point (any distance along its ray) to pixel coordinates.
    pub fn project(&self, point: &Vec3) -> Result<[f64; 2]> {
        let rho = point.x.hypot(point.y);
        if rho == 0.0 && point.z == 0.0 {
            return Err(Error::invalid("cannot project the projection centre"));
        }
        let theta = rho.atan2(point.z);
        let r = 2.0 * self.focal_scale * (theta / 2.0).sin();
        let [cx, cy] = self.principal_point;
        if rho == 0.0 {
            return Ok([cx, cy]);
        }
        Ok([cx + r * point.x / rho, cy + r * point.y / rho])
    }

    /// Unit ray through pixel coordinates `(u, v)`, or `None` outside the
    /// lens field of view.
    pub fn unproject(&self, u: f64, v: f64) -> Option<Vec3> {
        let [cx, cy] = self.principal_point;
        let (dx, dy) = (u - cx, v - cy);
        let r = dx.hypot(dy);
        let s = r / (2.0 * self.focal_scale);
        if s > 1.0 {
            return None;
        }
        // θ = 2·asin(s): cos θ = 1 - 2s², sin θ / r = √(1 - s²) / f
        let cos_t = 1.0 - 2.0 * s * s;
        if cos_t < self.max_field_angle().cos() {
            return None;
        }
        let k = (1.0 - s * s).sqrt() / self.focal_scale;
        Some(Vec3::new(k * dx, k * dy, cos_t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn on_axis_maps_to_principal_point() {
        let cam = CameraModel::default();
        assert_eq!(
            cam.project(&Vec3::new(0.0, 0.0, 21.0)).unwrap(),
            cam.principal_point
        );
    }

    #[test]
    fn right_angle_maps_to_f_root_two() {
        let cam = CameraModel::default();
        let [u, v] = cam.project(&Vec3::new(5.0, 0.0, 0.0)).unwrap();
        let r = (u - cam.principal_point[0]).hypot(v - cam.principal_point[1]);
        assert!((r - cam.focal_scale * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn origin_is_rejected() {
        assert!(CameraModel::default().project(&Vec3::zeros()).is_err());
    }

    #[test]
    fn unproject_inverts_project() {
        let cam = CameraModel::default();
        for p in [
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(-4.0, 0.5, 0.2),
            Vec3::new(0.0, 0.0, 1.0),
        ] {
            let [u, v] = cam.project(&p).unwrap();
            let ray = cam.unproject(u, v).unwrap();
            assert!((ray - p.normalize()).norm() < 1e-12);
        }
        assert!(cam.unproject(0.0, 0.0).is_none());
    }

    /// Pixel area of the annulus covering polar angles `[t0, t1]`, integrated
    /// numerically from the radial Jacobian `r(θ)·r'(θ)`.
    fn annulus_area(cam: &CameraModel, t0: f64, t1: f64) -> f64 {
        let r = |t: f64| 2.0 * cam.focal_scale * (t / 2.0).sin();
        let steps = 20_000;
        let h = (t1 - t0) / steps as f64;
        (0..steps)
            .map(|k| {
                let t = t0 + (k as f64 + 0.5) * h;
                let dr = (r(t + 1e-6) - r(t - 1e-6)) / 2e-6;
                2.0 * PI * r(t) * dr * h
            })
            .sum()
    }

    #[test]
    fn equal_solid_angles_get_equal_area() {
        let cam = CameraModel::default();
        // bands of equal solid angle 2π(cos t0 − cos t1) around 20° and 70°
        let omega = 0.05;
        let band = |centre_deg: f64| {
            let c = (centre_deg as f64).to_radians().cos();
            let t0 = (c + omega / (4.0 * PI)).acos();
            let t1 = (c - omega / (4.0 * PI)).acos();
            (t0, t1)
        };
        let (a0, a1) = band(20.0);
        let (b0, b1) = band(70.0);
        let a = annulus_area(&cam, a0, a1);
        let b = annulus_area(&cam, b0, b1);
        assert!(((a - b) / a).abs() < 0.01, "{a} vs {b}");
        let expected = cam.focal_scale.powi(2) * omega;
        assert!(((a - expected) / expected).abs() < 1e-3);
        assert!(FRAC_PI_2 > b1);
    }
}

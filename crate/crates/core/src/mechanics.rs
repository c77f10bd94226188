//! Quasi-static contact model between the sensor dome and a rigid object.
//!
//! The object is frictionless and infinitely stiff, so the relative approach
//! of the two bodies equals the commanded indentation. Hertz theory gives the
//! contact radius `a = √(R_eq δ_r)` with `R_eq = (1/R_s + 1/R_o)⁻¹`. At the
//! depth of the inner marker layer the normal displacement is modelled as
//! `u_z(r) = δ_r exp(−r²/a²)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MarkerLayout;
use crate::Vec3;

/// Object curvature and commanded indentation for one contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactScenario {
    object_curvature: f64,
    indentation: f64,
    sensor_radius: f64,
}

impl ContactScenario {
    /// `object_radius` is signed: positive for convex objects, negative for
    /// concave ones, infinite for a flat object.
    pub fn new(object_radius: f64, indentation: f64, sensor_radius: f64) -> Result<Self> {
        if object_radius == 0.0 || object_radius.is_nan() {
            return Err(Error::invalid("object radius must be non-zero"));
        }
        Self::with_curvature(1.0 / object_radius, indentation, sensor_radius)
    }

    pub fn flat(indentation: f64, sensor_radius: f64) -> Result<Self> {
        Self::with_curvature(0.0, indentation, sensor_radius)
    }

    pub fn with_curvature(curvature: f64, indentation: f64, sensor_radius: f64) -> Result<Self> {
        if !curvature.is_finite() {
            return Err(Error::invalid("object curvature must be finite"));
        }
        if !(indentation >= 0.0 && indentation.is_finite()) {
            return Err(Error::invalid(format!(
                "indentation must be non-negative, got {indentation}"
            )));
        }
        if !(sensor_radius > 0.0 && sensor_radius.is_finite()) {
            return Err(Error::invalid(format!(
                "sensor radius must be positive, got {sensor_radius}"
            )));
        }
        Ok(Self {
            object_curvature: curvature,
            indentation,
            sensor_radius,
        })
    }

    /// Object curvature `1/R_o` in mm⁻¹; zero for a flat object.
    pub fn object_curvature(&self) -> f64 {
        self.object_curvature
    }

    /// Signed object radius, `None` for a flat object.
    pub fn object_radius(&self) -> Option<f64> {
        (self.object_curvature != 0.0).then(|| 1.0 / self.object_curvature)
    }

    pub fn indentation(&self) -> f64 {
        self.indentation
    }

    pub fn sensor_radius(&self) -> f64 {
        self.sensor_radius
    }

    /// Equivalent radius `(1/R_s + 1/R_o)⁻¹`.
    pub fn equivalent_radius(&self) -> Result<f64> {
        let combined = 1.0 / self.sensor_radius + self.object_curvature;
        if combined <= 0.0 {
            return Err(Error::GeometryInfeasible(format!(
                "concave object radius {:.4} mm must exceed sensor radius {:.4} mm",
                -1.0 / self.object_curvature,
                self.sensor_radius
            )));
        }
        Ok(1.0 / combined)
    }
}

/// Contact radius `a` and relative displacement `δ_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState {
    pub contact_radius: f64,
    pub relative_displacement: f64,
}

pub fn solve_contact(scenario: &ContactScenario) -> Result<ContactState> {
    let r_eq = scenario.equivalent_radius()?;
    let delta = scenario.indentation();
    Ok(ContactState {
        contact_radius: (r_eq * delta).sqrt(),
        relative_displacement: delta,
    })
}

/// Gaussian normal displacement at the inner marker depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementField {
    amplitude: f64,
    width: f64,
}

impl DisplacementField {
    pub fn new(amplitude: f64, width: f64) -> Self {
        Self { amplitude, width }
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Normal displacement (mm) at radial distance `r` from the contact axis.
    pub fn normal(&self, r: f64) -> f64 {
        if self.width <= 0.0 || self.amplitude == 0.0 {
            return 0.0;
        }
        self.amplitude * (-(r * r) / (self.width * self.width)).exp()
    }
}

pub fn subsurface_normal_field(state: &ContactState) -> DisplacementField {
    if state.contact_radius <= 0.0 {
        return DisplacementField::new(0.0, 0.0);
    }
    DisplacementField::new(state.relative_displacement, state.contact_radius)
}

/// Parameters of the forward deformation model used to render frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardModel {
    /// Peak tangential displacement relative to `δ_r` at the outer surface.
    pub tangential_coefficient: f64,
    /// Total thickness of the dome assembly, mm. Tangential motion falls off
    /// linearly from the outer surface to this depth.
    pub assembly_thickness: f64,
    /// Compliance of the interlayer silicone relative to the effective contact
    /// modulus. Scales how much the gap between layers closes under pressure.
    pub layer_compliance: f64,
}

impl Default for ForwardModel {
    fn default() -> Self {
        Self {
            tangential_coefficient: 0.2,
            assembly_thickness: 4.0,
            layer_compliance: 1.0,
        }
    }
}

impl ForwardModel {
    pub fn validate(&self, layer_separation: f64) -> Result<()> {
        if !(self.tangential_coefficient >= 0.0 && self.tangential_coefficient.is_finite()) {
            return Err(Error::invalid("tangential_coefficient must be >= 0"));
        }
        if !(self.assembly_thickness > layer_separation && self.assembly_thickness.is_finite()) {
            return Err(Error::invalid(
                "assembly_thickness must exceed the layer separation",
            ));
        }
        if !(self.layer_compliance >= 0.0 && self.layer_compliance.is_finite()) {
            return Err(Error::invalid("layer_compliance must be >= 0"));
        }
        Ok(())
    }
}

/// Hertz surface profile `δ_r − r²/(2R_eq)`, clipped at zero.
pub fn surface_normal(state: &ContactState, r_eq: f64, r: f64) -> f64 {
    (state.relative_displacement - r * r / (2.0 * r_eq)).max(0.0)
}

/// Thickness lost by the interlayer silicone under the Hertz pressure
/// `p(r) = (2E*/π) √(δ_r/R_eq) √(1 − r²/a²)`, for a layer whose modulus is
/// `E* / compliance`.
pub fn interlayer_compression(
    state: &ContactState,
    r_eq: f64,
    r: f64,
    layer_separation: f64,
    compliance: f64,
) -> f64 {
    let a = state.contact_radius;
    if a <= 0.0 || r >= a {
        return 0.0;
    }
    let pressure =
        2.0 / PI * (state.relative_displacement / r_eq).sqrt() * (1.0 - (r * r) / (a * a)).sqrt();
    layer_separation * compliance * pressure
}

/// Tangential displacement magnitude at `depth` below the outer layer.
pub fn tangential(state: &ContactState, model: &ForwardModel, r: f64, depth: f64) -> f64 {
    let a = state.contact_radius;
    if a <= 0.0 {
        return 0.0;
    }
    let falloff = (1.0 - depth / model.assembly_thickness).max(0.0);
    let x = r / a;
    model.tangential_coefficient * state.relative_displacement * x * (-x * x).exp() * falloff
}

/// Distance from `p` to the line through the origin along unit `axis`.
pub fn distance_from_axis(p: &Vec3, axis: &Vec3) -> f64 {
    (p - axis * p.dot(axis)).norm()
}

/// Unit tangent to the sphere at `p` pointing away from the contact axis,
/// zero when `p` lies on the axis.
fn meridian_direction(p: &Vec3, axis: &Vec3) -> Vec3 {
    let norm = p.norm();
    let off_axis = p - axis * p.dot(axis);
    let w = off_axis.norm();
    if w <= 1e-12 * norm {
        return Vec3::zeros();
    }
    let cos_t = p.dot(axis) / norm;
    let sin_t = w / norm;
    off_axis / w * cos_t - axis * sin_t
}

/// Checks and normalises a contact axis pointing into the sensing half-space.
pub fn normalized_axis(axis: &Vec3) -> Result<Vec3> {
    let n = axis.norm();
    if !n.is_finite() || n <= 0.0 {
        return Err(Error::invalid(
            "contact axis must be a non-zero finite vector",
        ));
    }
    let unit = axis / n;
    if unit.z <= 0.0 {
        return Err(Error::invalid(
            "contact axis must point into the sensing hemisphere (z > 0)",
        ));
    }
    Ok(unit)
}

/// Displacement of one marker pair, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerDisplacement {
    pub outer: Vec3,
    pub inner: Vec3,
}

impl MarkerDisplacement {
    pub const ZERO: Self = Self {
        outer: Vec3::new(0.0, 0.0, 0.0),
        inner: Vec3::new(0.0, 0.0, 0.0),
    };
}

/// Per-marker displacement of both layers for a contact along `contact_axis`.
///
/// Normal components point toward the dome centre. The inner layer follows
/// the gaussian subsurface field; the outer layer follows the Hertz surface
/// profile plus the compression of the interlayer silicone. Both layers move
/// along the meridian away from the axis, the outer one more. Each layer is
/// evaluated at its own rest distance from the axis and is motionless beyond
/// three contact radii.
pub fn marker_displacements(
    layout: &MarkerLayout,
    scenario: &ContactScenario,
    contact_axis: &Vec3,
    model: &ForwardModel,
) -> Result<Vec<MarkerDisplacement>> {
    let axis = normalized_axis(contact_axis)?;
    let state = solve_contact(scenario)?;
    if state.contact_radius <= 0.0 {
        return Ok(vec![MarkerDisplacement::ZERO; layout.len()]);
    }
    let r_eq = scenario.equivalent_radius()?;
    let field = subsurface_normal_field(&state);
    let separation = layout.outer_radius() - layout.inner_radius();
    let cutoff = 3.0 * state.contact_radius;

    let layer = |p: &Vec3, normal: f64, depth: f64| -> Vec3 {
        let r = distance_from_axis(p, &axis);
        if r >= cutoff {
            return Vec3::zeros();
        }
        let inward = -p / p.norm();
        inward * normal + meridian_direction(p, &axis) * tangential(&state, model, r, depth)
    };

    Ok(layout
        .outer_positions()
        .iter()
        .zip(layout.inner_positions())
        .map(|(po, pi)| {
            let r_out = distance_from_axis(po, &axis);
            let outer_normal = surface_normal(&state, r_eq, r_out)
                + interlayer_compression(&state, r_eq, r_out, separation, model.layer_compliance);
            let inner_normal = field.normal(distance_from_axis(pi, &axis));
            MarkerDisplacement {
                outer: layer(po, outer_normal, 0.0),
                inner: layer(pi, inner_normal, separation),
            }
        })
        .collect())
}

/// Displacement of a linear elastic layer, `δ = F t / (A E)`.
///
/// Units: N, mm, mm², MPa → mm.
pub fn sensitivity(
    force: f64,
    thickness: f64,
    contact_area: f64,
    youngs_modulus: f64,
) -> Result<f64> {
    let inputs = [force, thickness, contact_area, youngs_modulus];
    if inputs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!(
            "sensitivity inputs must be positive, got {inputs:?}"
        )));
    }
    Ok(force * thickness / (contact_area * youngs_modulus))
}

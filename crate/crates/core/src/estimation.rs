//! Displacement field reconstruction, gaussian contact fit and curvature.

use delaunator::{triangulate, Point};
use nalgebra::{Matrix4, Vector4};

use crate::calibration::{sample_vector, CalibrationMatrix};
use crate::error::{Error, Result};
use crate::geometry::MarkerLayout;
use crate::imaging::MarkerObservation;
use crate::mechanics::normalized_axis;
use crate::Vec3;

/// Minimum number of samples for a fit, and inside `2a` after it.
pub const MIN_SAMPLES: usize = 6;
/// Default contact detection threshold, mm.
pub const NOISE_FLOOR: f64 = 0.05;
/// Object curvature below which the object is reported flat, 1/mm.
pub const FLAT_CURVATURE: f64 = 1e-6;

const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE: f64 = 1e-9;

/// Orthonormal basis of the plane normal to `axis`.
fn tangent_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let e1 = (helper - axis * helper.dot(axis)).normalize();
    let e2 = axis.cross(&e1);
    (e1, e2)
}

/// Coordinates of `p` projected onto the plane normal to the contact axis.
pub fn tangent_plane_coordinates(p: &Vec3, axis: &Vec3) -> Result<[f64; 2]> {
    let axis = normalized_axis(axis)?;
    let (e1, e2) = tangent_basis(&axis);
    Ok([p.dot(&e1), p.dot(&e2)])
}

/// Normal displacement samples in the tangent plane, mm.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledField {
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    /// Marker index of each sample.
    pub markers: Vec<usize>,
}

impl SampledField {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, marker: usize, point: [f64; 2], value: f64) {
        self.markers.push(marker);
        self.points.push(point);
        self.values.push(value);
    }

    pub fn peak(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Predicts the normal displacement of every matched marker and places it at
/// the marker's inner rest position.
pub fn reconstruct_field(
    calibration: &CalibrationMatrix,
    observations: &[(usize, MarkerObservation)],
    layout: &MarkerLayout,
    contact_axis: &Vec3,
) -> Result<SampledField> {
    if observations.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} matched markers, at least {MIN_SAMPLES} needed",
            observations.len()
        )));
    }
    let axis = normalized_axis(contact_axis)?;
    let (e1, e2) = tangent_basis(&axis);
    let meta = calibration.meta();
    let mut field = SampledField::default();
    for (marker, obs) in observations {
        let rest = layout.inner_positions().get(*marker).ok_or_else(|| {
            Error::invalid(format!(
                "marker index {marker} outside a layout of {}",
                layout.len()
            ))
        })?;
        let column = sample_vector(obs, meta.image_width, meta.image_height)?;
        let value = calibration.apply(&column)?;
        field.push(*marker, [rest.dot(&e1), rest.dot(&e2)], value);
    }
    Ok(field)
}

/// Linear interpolation over a Delaunay triangulation of sample points.
#[derive(Debug, Clone)]
pub struct TriangleInterpolator {
    points: Vec<[f64; 2]>,
    values: Vec<f64>,
    triangles: Vec<[usize; 3]>,
}

impl TriangleInterpolator {
    pub fn new(field: &SampledField) -> Result<Self> {
        if field.len() < 3 {
            return Err(Error::invalid("interpolation needs at least 3 samples"));
        }
        let pts: Vec<Point> = field
            .points
            .iter()
            .map(|p| Point { x: p[0], y: p[1] })
            .collect();
        let t = triangulate(&pts);
        if t.triangles.is_empty() {
            return Err(Error::invalid("samples are collinear or coincident"));
        }
        Ok(Self {
            points: field.points.clone(),
            values: field.values.clone(),
            triangles: t
                .triangles
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        })
    }

    /// Value at `q`, `None` outside the convex hull.
    pub fn at(&self, q: [f64; 2]) -> Option<f64> {
        if let Some(i) = self.points.iter().position(|p| *p == q) {
            return Some(self.values[i]);
        }
        const EPS: f64 = 1e-12;
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|i| self.points[i]);
            let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
            if det == 0.0 {
                continue;
            }
            let l1 = ((b[1] - c[1]) * (q[0] - c[0]) + (c[0] - b[0]) * (q[1] - c[1])) / det;
            let l2 = ((c[1] - a[1]) * (q[0] - c[0]) + (a[0] - c[0]) * (q[1] - c[1])) / det;
            let l3 = 1.0 - l1 - l2;
            if l1 >= -EPS && l2 >= -EPS && l3 >= -EPS {
                let [va, vb, vc] = tri.map(|i| self.values[i]);
                return Some(l1 * va + l2 * vb + l3 * vc);
            }
        }
        None
    }
}

/// Regular grid of interpolated values, NaN outside the sample hull.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `values[j * nx + i]` at `origin + spacing·(i, j)`.
    pub values: Vec<f64>,
}

impl GriddedField {
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + self.spacing * i as f64,
            self.origin[1] + self.spacing * j as f64,
        ]
    }
}

/// Samples the triangulated field on a grid spanning the bounding box of the
/// samples.
pub fn interpolate_grid(field: &SampledField, spacing: f64) -> Result<GriddedField> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid("grid spacing must be positive"));
    }
    let interp = TriangleInterpolator::new(field)?;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &field.points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let nx = ((hi[0] - lo[0]) / spacing).floor() as usize + 1;
    let ny = ((hi[1] - lo[1]) / spacing).floor() as usize + 1;
    let mut grid = GriddedField {
        origin: lo,
        spacing,
        nx,
        ny,
        values: Vec::with_capacity(nx * ny),
    };
    for j in 0..ny {
        for i in 0..nx {
            let v = interp.at(grid.point(i, j)).unwrap_or(f64::NAN);
            grid.values.push(v);
        }
    }
    Ok(grid)
}

/// Least-squares fit of `δ_r·exp(−‖p − p₀‖²/a²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub width: f64,
    pub center: [f64; 2],
    pub rms_residual: f64,
    pub iterations: usize,
}

fn model(p: &Vector4<f64>, q: [f64; 2]) -> (f64, Vector4<f64>) {
    let (amp, x0, y0, a) = (p[0], p[1], p[2], p[3]);
    let (dx, dy) = (q[0] - x0, q[1] - y0);
    let r2 = dx * dx + dy * dy;
    let a2 = a * a;
    let e = (-r2 / a2).exp();
    let f = amp * e;
    let grad = Vector4::new(
        e,
        f * 2.0 * dx / a2,
        f * 2.0 * dy / a2,
        f * 2.0 * r2 / (a2 * a),
    );
    (f, grad)
}

fn cost(p: &Vector4<f64>, field: &SampledField) -> f64 {
    field
        .points
        .iter()
        .zip(&field.values)
        .map(|(q, v)| (v - model(p, *q).0).powi(2))
        .sum()
}

/// Moment-based starting point: peak amplitude, weighted centre and a width
/// from the second moment of the samples above a tenth of the peak.
fn initial_guess(field: &SampledField, peak: f64) -> Vector4<f64> {
    let threshold = 0.1 * peak;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (q, &v) in field.points.iter().zip(&field.values) {
        if v > threshold {
            sw += v;
            sx += v * q[0];
            sy += v * q[1];
        }
    }
    let (cx, cy) = (sx / sw, sy / sw);
    let mut m2 = 0.0;
    for (q, &v) in field.points.iter().zip(&field.values) {
        if v > threshold {
            m2 += v * ((q[0] - cx).powi(2) + (q[1] - cy).powi(2));
        }
    }
    // second moment of a gaussian truncated at a tenth of its peak
    let truncated = (1.0 - 0.1 * (1.0 + 10f64.ln())) / 0.9;
    let width = (m2 / sw / truncated).sqrt().max(1e-3);
    Vector4::new(peak, cx, cy, width)
}

pub fn fit_gaussian(field: &SampledField, noise_floor: f64) -> Result<GaussianFit> {
    if field.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} samples, at least {MIN_SAMPLES} needed",
            field.len()
        )));
    }
    let peak = field.peak();
    if !(peak > noise_floor) {
        return Err(Error::NoContact {
            peak_mm: peak,
            floor_mm: noise_floor,
        });
    }
    let mut p = initial_guess(field, peak);
    let mut current = cost(&p, field);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (q, v) in field.points.iter().zip(&field.values) {
            let (f, g) = model(&p, *q);
            jtj += g * g.transpose();
            jtr += g * (v - f);
        }
        // damp until the step lowers the cost or becomes negligible
        loop {
            let mut damped = jtj;
            for k in 0..4 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = damped.lu().solve(&jtr).unwrap_or_else(Vector4::zeros);
            let candidate = p + step;
            let small = step.norm() <= STEP_TOLERANCE * (p.norm() + STEP_TOLERANCE);
            let c = if candidate[3] > 0.0 {
                cost(&candidate, field)
            } else {
                f64::INFINITY
            };
            if c <= current {
                p = candidate;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                converged = small;
                break;
            }
            if small {
                converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::FitFailed {
            iterations,
            reason: format!("step did not fall below {STEP_TOLERANCE:e}"),
        });
    }
    let fit = GaussianFit {
        amplitude: p[0],
        width: p[3].abs(),
        center: [p[1], p[2]],
        rms_residual: (current / field.len() as f64).sqrt(),
        iterations,
    };
    if !(fit.amplitude > 0.0
        && fit.width > 0.0
        && fit.amplitude.is_finite()
        && fit.width.is_finite())
    {
        return Err(Error::FitFailed {
            iterations,
            reason: format!(
                "non-physical parameters δ_r={}, a={}",
                fit.amplitude, fit.width
            ),
        });
    }
    let support = field
        .points
        .iter()
        .filter(|q| (q[0] - fit.center[0]).hypot(q[1] - fit.center[1]) <= 2.0 * fit.width)
        .count();
    if support < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{support} samples within 2a of the fitted centre, at least {MIN_SAMPLES} needed"
        )));
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureEstimate {
    pub equivalent_radius: f64,
    /// 1/mm, positive for convex objects.
    pub object_curvature: f64,
    /// `None` when the object is flat.
    pub object_radius: Option<f64>,
}

/// `R_eq = a²/δ_r`, `κ_o = 1/R_eq − 1/R_s`.
pub fn estimate_curvature(fit: &GaussianFit, sensor_radius: f64) -> Result<CurvatureEstimate> {
    if !(fit.amplitude > 0.0) {
        return Err(Error::FitFailed {
            iterations: fit.iterations,
            reason: "amplitude must be positive".into(),
        });
    }
    if !(sensor_radius > 0.0) {
        return Err(Error::invalid("sensor radius must be positive"));
    }
    let equivalent_radius = fit.width * fit.width / fit.amplitude;
    let object_curvature = 1.0 / equivalent_radius - 1.0 / sensor_radius;
    Ok(CurvatureEstimate {
        equivalent_radius,
        object_curvature,
        object_radius: (object_curvature.abs() > FLAT_CURVATURE).then(|| 1.0 / object_curvature),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layout, SensorGeometry};
    use crate::mechanics::{solve_contact, ContactScenario};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn analytic(amp: f64, a: f64, center: [f64; 2]) -> SampledField {
        let layout = build_layout(&SensorGeometry::default()).unwrap();
        let mut f = SampledField::default();
        for (i, p) in layout.inner_positions().iter().enumerate() {
            let q = tangent_plane_coordinates(p, &Vec3::z()).unwrap();
            let r2 = (q[0] - center[0]).powi(2) + (q[1] - center[1]).powi(2);
            f.push(i, q, amp * (-r2 / (a * a)).exp());
        }
        f
    }

    fn fit(amp: f64, width: f64) -> GaussianFit {
        GaussianFit {
            amplitude: amp,
            width,
            center: [0.0; 2],
            rms_residual: 0.0,
            iterations: 0,
        }
    }

    #[test]
    fn recovers_noise_free_parameters() {
        let g = fit_gaussian(&analytic(2.0, 5.0, [0.0, 0.0]), NOISE_FLOOR).unwrap();
        assert!((g.amplitude / 2.0 - 1.0).abs() < 1e-6, "{g:?}");
        assert!((g.width / 5.0 - 1.0).abs() < 1e-6, "{g:?}");
        assert!(g.rms_residual < 1e-8);
    }

    #[test]
    fn recovers_offset_centre() {
        let g = fit_gaussian(&analytic(8.0, 12.961, [1.5, -2.0]), NOISE_FLOOR).unwrap();
        assert!((g.center[0] - 1.5).abs() < 1e-6 && (g.center[1] + 2.0).abs() < 1e-6);
        assert!((g.width / 12.961 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_field_is_no_contact() {
        let f = analytic(0.0, 5.0, [0.0, 0.0]);
        assert!(matches!(
            fit_gaussian(&f, NOISE_FLOOR),
            Err(Error::NoContact { .. })
        ));
    }

    #[test]
    fn too_few_samples() {
        let mut f = SampledField::default();
        for i in 0..5 {
            f.push(i, [i as f64, 0.0], 1.0);
        }
        assert!(matches!(
            fit_gaussian(&f, NOISE_FLOOR),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn support_outside_contact_is_insufficient() {
        // a sharp bump centred far from every sample
        let f = analytic(1.0, 0.3, [30.0, 30.0]);
        let mut g = f.clone();
        g.values[0] = 1.0;
        assert!(fit_gaussian(&g, NOISE_FLOOR).is_err());
    }

    #[test]
    fn monte_carlo_noise() {
        let clean = analytic(2.0, 5.0, [0.0, 0.0]);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut amp_err = Vec::new();
        let mut width_err = Vec::new();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = clean.clone();
            for v in f.values.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            let g = fit_gaussian(&f, NOISE_FLOOR).unwrap();
            amp_err.push((g.amplitude / 2.0 - 1.0).abs());
            width_err.push((g.width / 5.0 - 1.0).abs());
        }
        for errs in [&mut amp_err, &mut width_err] {
            errs.sort_by(f64::total_cmp);
            assert!(errs[94] < 0.02, "95th percentile {}", errs[94]);
        }
    }

    #[test]
    fn curvature_examples() {
        let flat = estimate_curvature(&fit(8.0, 168f64.sqrt()), 21.0).unwrap();
        assert!((flat.equivalent_radius - 21.0).abs() < 1e-12);
        assert_eq!(flat.object_radius, None);

        let convex = estimate_curvature(&fit(8.0, (8.0 * 840.0 / 61.0f64).sqrt()), 21.0).unwrap();
        assert!((convex.equivalent_radius - 840.0 / 61.0).abs() < 1e-9);
        assert!((convex.object_radius.unwrap() - 40.0).abs() < 1e-9);
        // rounded contact radius from the worked example
        let rounded = estimate_curvature(&fit(8.0, 10.496), 21.0).unwrap();
        assert!((rounded.equivalent_radius - 13.770).abs() < 1e-3);
        assert!((rounded.object_radius.unwrap() - 40.0).abs() < 0.1);

        let concave = estimate_curvature(&fit(8.0, (8.0 * 840.0 / 19.0f64).sqrt()), 21.0).unwrap();
        assert!((concave.object_radius.unwrap() + 40.0).abs() < 1e-9);
        assert!(estimate_curvature(&fit(0.0, 1.0), 21.0).is_err());
    }

    #[test]
    fn interpolation_reproduces_nodes_and_centroid() {
        let mut f = SampledField::default();
        f.push(0, [0.0, 0.0], 0.0);
        f.push(1, [3.0, 0.0], 0.0);
        f.push(2, [0.0, 3.0], 3.0);
        let interp = TriangleInterpolator::new(&f).unwrap();
        assert_eq!(interp.at([0.0, 3.0]), Some(3.0));
        assert!((interp.at([1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(interp.at([5.0, 5.0]), None);
    }

    #[test]
    fn collinear_samples_rejected() {
        let mut f = SampledField::default();
        for i in 0..4 {
            f.push(i, [i as f64, 2.0 * i as f64], 1.0);
        }
        assert!(matches!(
            interpolate_grid(&f, 0.5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grid_error_against_analytic_field() {
        let (amp, a) = (8.0, 10.496);
        let f = analytic(amp, a, [0.0, 0.0]);
        let grid = interpolate_grid(&f, 0.5).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let v = grid.values[j * grid.nx + i];
                if v.is_nan() {
                    continue;
                }
                let q = grid.point(i, j);
                let exact = amp * (-(q[0] * q[0] + q[1] * q[1]) / (a * a)).exp();
                worst = worst.max((v - exact).abs());
            }
        }
        assert!(worst < 0.05 * amp, "max error {worst}");
        assert!(
            grid.values.iter().any(|v| v.is_nan()),
            "corners lie outside the hull"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn forward_inverse_identity(
            curvature in -0.045..0.2f64,
            indentation in 0.01..10.0f64,
        ) {
            let s = ContactScenario::with_curvature(curvature, indentation, 21.0).unwrap();
            let state = solve_contact(&s).unwrap();
            let est = estimate_curvature(&fit(state.relative_displacement, state.contact_radius), 21.0).unwrap();
            let r_eq = s.equivalent_radius().unwrap();
            prop_assert!((est.equivalent_radius / r_eq - 1.0).abs() < 1e-9);
        }
    }
}

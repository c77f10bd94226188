//! Linear calibration from marker sub-images to normal displacement.
//!
//! Each sample is a marker's sub-image, channels scaled to `[0, 1]`, with the
//! marker centroid appended as fractions of the image width and height. The
//! map `A` is the minimum-norm least-squares solution of `A·M ≈ Z`, computed
//! through a pseudo-inverse with a relative singular value cutoff.
//!
//! Large training sets never need the full design matrix: samples are folded
//! into the triangular factor of `[Mᵀ | Zᵀ]` block by block, which carries the
//! same singular values, the same least-squares solution and the residual of
//! any candidate map.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MarkerLayout;
use crate::imaging::MarkerObservation;
use crate::mechanics::{
    distance_from_axis, normalized_axis, solve_contact, subsurface_normal_field, ContactScenario,
};
use crate::Vec3;

/// Relative singular value cutoff of the pseudo-inverse.
pub const SINGULAR_CUTOFF: f64 = 1e-10;

/// Length of a sample column for a `window × window` sub-image.
pub fn feature_count(window: usize) -> usize {
    3 * window * window + 2
}

/// Vectorised sub-image plus normalised centroid.
pub fn sample_vector(
    obs: &MarkerObservation,
    image_width: u32,
    image_height: u32,
) -> Result<Vec<f64>> {
    if image_width == 0 || image_height == 0 {
        return Err(Error::invalid("image size must be non-zero"));
    }
    let data = obs.sub_image.data();
    let mut v = Vec::with_capacity(data.len() + 2);
    v.extend(data.iter().map(|&b| b as f64 / 255.0));
    v.push(obs.centroid[0] / image_width as f64);
    v.push(obs.centroid[1] / image_height as f64);
    Ok(v)
}

/// Column-major sample matrix, one column per (frame, marker).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("no samples"))?;
        if rows == 0 {
            return Err(Error::invalid("samples must be non-empty"));
        }
        let mut data = Vec::with_capacity(rows * columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::invalid(format!(
                    "column {j} has length {} but column 0 has {rows}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("column {j} has non-finite entries")));
            }
            data.extend_from_slice(c);
        }
        Ok(Self {
            rows,
            cols: columns.len(),
            data,
        })
    }

    /// `(rows, columns)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }
}

/// One column per observation, frames in order and markers in the order
/// given within each frame.
pub fn build_design_matrix(
    frames: &[Vec<MarkerObservation>],
    image_width: u32,
    image_height: u32,
) -> Result<DesignMatrix> {
    let window = frames
        .iter()
        .flatten()
        .next()
        .map(|o| o.sub_image.size())
        .ok_or_else(|| Error::invalid("no observations to build a design matrix from"))?;
    let mut columns = Vec::new();
    for obs in frames.iter().flatten() {
        if obs.sub_image.size() != window {
            return Err(Error::invalid(format!(
                "mixed sub-image sizes {window} and {}",
                obs.sub_image.size()
            )));
        }
        columns.push(sample_vector(obs, image_width, image_height)?);
    }
    DesignMatrix::from_columns(&columns)
}

/// Ground-truth normal displacement per sample, mm.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector(pub Vec<f64>);

impl TargetVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Subsurface field at each listed marker's inner rest position, one frame
/// per scenario.
pub fn ground_truth_targets(
    layout: &MarkerLayout,
    scenarios: &[ContactScenario],
    contact_axis: &Vec3,
    frame_markers: &[Vec<usize>],
) -> Result<TargetVector> {
    if scenarios.len() != frame_markers.len() {
        return Err(Error::invalid(format!(
            "{} scenarios for {} frames",
            scenarios.len(),
            frame_markers.len()
        )));
    }
    let axis = normalized_axis(contact_axis)?;
    let mut z = Vec::new();
    for (scenario, markers) in scenarios.iter().zip(frame_markers) {
        let field = subsurface_normal_field(&solve_contact(scenario)?);
        for &m in markers {
            let p = layout.inner_positions().get(m).ok_or_else(|| {
                Error::invalid(format!(
                    "marker index {m} outside a layout of {}",
                    layout.len()
                ))
            })?;
            z.push(field.normal(distance_from_axis(p, &axis)));
        }
    }
    Ok(TargetVector(z))
}

/// Triangular factor of the augmented sample matrix `[Mᵀ | Zᵀ]`, built up
/// one block of samples at a time.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    features: usize,
    samples: usize,
    factor: Option<Mat<f64>>,
}

impl LeastSquares {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            samples: 0,
            factor: None,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    fn absorb(&mut self, rows: usize, fill: impl Fn(usize, usize) -> f64) {
        let width = self.features + 1;
        let prev = self.factor.take();
        let offset = prev.as_ref().map_or(0, |p| p.nrows());
        let stacked = Mat::<f64>::from_fn(offset + rows, width, |i, j| match &prev {
            Some(p) if i < offset => p[(i, j)],
            _ => fill(i - offset, j),
        });
        self.factor = Some(stacked.qr().thin_R().to_owned());
    }

    /// Adds samples given as columns of `M` with their targets.
    pub fn push(&mut self, columns: &[Vec<f64>], targets: &[f64]) -> Result<()> {
        if columns.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} targets",
                columns.len(),
                targets.len()
            )));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != self.features) {
            return Err(Error::invalid(format!(
                "sample length {} does not match {} features",
                c.len(),
                self.features
            )));
        }
        if columns.is_empty() {
            return Ok(());
        }
        let f = self.features;
        self.absorb(columns.len(), |i, j| {
            if j < f {
                columns[i][j]
            } else {
                targets[i]
            }
        });
        self.samples += columns.len();
        Ok(())
    }

    pub fn push_matrix(&mut self, m: &DesignMatrix, z: &TargetVector) -> Result<()> {
        let (rows, cols) = m.shape();
        if rows != self.features || cols != z.len() {
            return Err(Error::invalid(format!(
                "design matrix is {rows}x{cols}, expected {} rows and {} columns",
                self.features,
                z.len()
            )));
        }
        let f = self.features;
        self.absorb(cols, |i, j| if j < f { m.get(j, i) } else { z.0[i] });
        self.samples += cols;
        Ok(())
    }

    /// Folds in another accumulator over the same features.
    pub fn merge(&mut self, other: &LeastSquares) -> Result<()> {
        if other.features != self.features {
            return Err(Error::invalid(
                "cannot merge accumulators of different width",
            ));
        }
        if let Some(r) = &other.factor {
            if self.factor.is_none() {
                self.factor = Some(r.clone());
            } else {
                self.absorb(r.nrows(), |i, j| r[(i, j)]);
            }
            self.samples += other.samples;
        }
        Ok(())
    }

    /// Minimum-norm least-squares coefficients and the numerical rank.
    pub fn solve(&self, cutoff: f64) -> Result<(Vec<f64>, usize)> {
        let f = self.features;
        let Some(r) = &self.factor else {
            return Err(Error::InsufficientData("no samples accumulated".into()));
        };
        let m = r.nrows();
        let lhs = Mat::<f64>::from_fn(m, f, |i, j| r[(i, j)]);
        let svd = lhs
            .thin_svd()
            .map_err(|e| Error::Data(format!("singular value decomposition failed: {e:?}")))?;
        let s = svd.S().column_vector();
        let smax = (0..s.nrows()).map(|k| s[k]).fold(0.0, f64::max);
        if smax == 0.0 {
            log::warn!("design matrix is all zero; calibration is the zero map");
            return Ok((vec![0.0; f], 0));
        }
        let rhs = Mat::<f64>::from_fn(m, 1, |i, _| r[(i, f)]);
        let mut proj = svd.U().transpose() * &rhs;
        let mut rank = 0;
        for k in 0..s.nrows() {
            if s[k] > cutoff * smax {
                proj[(k, 0)] /= s[k];
                rank += 1;
            } else {
                proj[(k, 0)] = 0.0;
            }
        }
        let coeffs = svd.V() * &proj;
        Ok(((0..f).map(|j| coeffs[(j, 0)]).collect(), rank))
    }

    /// Sum of squared residuals `‖A·M − Z‖²` of the accumulated samples.
    pub fn residual_sum_sq(&self, coefficients: &[f64]) -> Result<f64> {
        if coefficients.len() != self.features {
            return Err(Error::invalid("coefficient length does not match features"));
        }
        let Some(r) = &self.factor else {
            return Ok(0.0);
        };
        let f = self.features;
        Ok((0..r.nrows())
            .map(|i| {
                let fitted: f64 = (i..f).map(|j| r[(i, j)] * coefficients[j]).sum();
                (fitted - r[(i, f)]).powi(2)
            })
            .sum())
    }

    /// Root mean square residual per sample.
    pub fn rms(&self, coefficients: &[f64]) -> Result<f64> {
        if self.samples == 0 {
            return Ok(0.0);
        }
        Ok((self.residual_sum_sq(coefficients)? / self.samples as f64).sqrt())
    }
}

/// Everything needed to reject mismatched inputs at apply time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationMeta {
    pub format: String,
    pub window: usize,
    pub features: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Centroid columns are divided by the image width and height.
    pub centroid_normalization: String,
    pub channel_scale: f64,
    pub singular_cutoff: f64,
    pub rank: usize,
    pub samples: usize,
    pub training_rms: f64,
    pub compat_hash: String,
    pub manifest_hash: String,
    pub scenarios: Vec<String>,
}

const FORMAT: &str = "tactwin-calibration/1";

impl CalibrationMeta {
    pub fn new(window: usize, image_width: u32, image_height: u32) -> Self {
        Self {
            format: FORMAT.into(),
            window,
            features: feature_count(window),
            image_width,
            image_height,
            centroid_normalization: "image_size".into(),
            channel_scale: 1.0 / 255.0,
            singular_cutoff: SINGULAR_CUTOFF,
            rank: 0,
            samples: 0,
            training_rms: 0.0,
            compat_hash: String::new(),
            manifest_hash: String::new(),
            scenarios: Vec::new(),
        }
    }
}

/// Row vector `A` with its metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMatrix {
    coefficients: Vec<f64>,
    meta: CalibrationMeta,
}

impl CalibrationMatrix {
    pub fn new(coefficients: Vec<f64>, meta: CalibrationMeta) -> Result<Self> {
        if coefficients.len() != meta.features {
            return Err(Error::invalid(format!(
                "{} coefficients for {} features",
                coefficients.len(),
                meta.features
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("calibration coefficients must be finite"));
        }
        Ok(Self { coefficients, meta })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn meta(&self) -> &CalibrationMeta {
        &self.meta
    }

    pub fn apply(&self, column: &[f64]) -> Result<f64> {
        apply_calibration(self, column)
    }

    /// Refuses data produced with another window, image size or setup.
    pub fn check_compatible(
        &self,
        window: usize,
        width: u32,
        height: u32,
        compat_hash: &str,
    ) -> Result<()> {
        let m = &self.meta;
        if m.window != window || m.image_width != width || m.image_height != height {
            return Err(Error::Config(format!(
                "calibration was built for window {} on {}x{} images, data has window {window} on {width}x{height}",
                m.window, m.image_width, m.image_height
            )));
        }
        if m.compat_hash != compat_hash {
            return Err(Error::Config(format!(
                "calibration setup hash {} does not match {compat_hash}",
                m.compat_hash
            )));
        }
        Ok(())
    }

    /// JSON header on the first line, then one coefficient per line.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::to_string(&self.meta).map_err(std::io::Error::other)?;
        writeln!(out, "{header}")?;
        for c in &self.coefficients {
            writeln!(out, "{c:e}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty calibration file".into()))?
            .map_err(|e| Error::Data(e.to_string()))?;
        let meta: CalibrationMeta = serde_json::from_str(&header)
            .map_err(|e| Error::Data(format!("calibration header: {e}")))?;
        if meta.format != FORMAT {
            return Err(Error::Data(format!(
                "unsupported calibration format {:?}",
                meta.format
            )));
        }
        if meta.features != feature_count(meta.window) {
            return Err(Error::Data(format!(
                "header declares {} features for window {}",
                meta.features, meta.window
            )));
        }
        let mut coefficients = Vec::with_capacity(meta.features);
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad coefficient {line:?}", k + 2)))?;
            coefficients.push(v);
        }
        Self::new(coefficients, meta).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Pseudo-inverse solution `A = Z·M⁺` with the default cutoff.
pub fn solve_calibration(m: &DesignMatrix, z: &TargetVector) -> Result<CalibrationMatrix> {
    let (rows, cols) = m.shape();
    if cols != z.len() {
        return Err(Error::invalid(format!(
            "{cols} samples but {} targets",
            z.len()
        )));
    }
    let mut acc = LeastSquares::new(rows);
    acc.push_matrix(m, z)?;
    let (coefficients, rank) = acc.solve(SINGULAR_CUTOFF)?;
    let window = ((rows.saturating_sub(2)) as f64 / 3.0).sqrt().round() as usize;
    let mut meta = CalibrationMeta::new(window, 1, 1);
    // raw matrices need not come from square sub-images
    meta.features = rows;
    meta.rank = rank;
    meta.samples = cols;
    meta.training_rms = acc.rms(&coefficients)?;
    CalibrationMatrix::new(coefficients, meta)
}

/// Inner product of the map with one sample column.
pub fn apply_calibration(calibration: &CalibrationMatrix, column: &[f64]) -> Result<f64> {
    if column.len() != calibration.coefficients.len() {
        return Err(Error::invalid(format!(
            "sample has {} entries, calibration expects {}",
            column.len(),
            calibration.coefficients.len()
        )));
    }
    Ok(calibration
        .coefficients
        .iter()
        .zip(column)
        .map(|(a, x)| a * x)
        .sum())
}

//! Experiment configuration file.
//!
//! A TOML document with a schema version and one table per stage. Every key
//! has a default, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::SensorGeometry;
use crate::imaging::SegmentParams;
use crate::mechanics::{normalized_axis, ContactScenario, ForwardModel};
use crate::renderer::{CameraModel, OpticalFilterModel, RenderSettings};
use crate::Vec3;

pub const SCHEMA_VERSION: u32 = 1;

/// Objects, indentation schedule and trials of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    /// Signed object radii, mm; `inf` for a flat object.
    pub object_radii: Vec<f64>,
    /// Indentation depths, mm, strictly increasing.
    pub indentations: Vec<f64>,
    pub trials: usize,
    pub seed: Option<u64>,
    pub contact_axis: [f64; 3],
}

impl Default for Protocol {
    fn default() -> Self {
        let mut indentations = vec![0.0, 0.5];
        indentations.extend((1..=10).map(f64::from));
        Self {
            object_radii: vec![-40.0, f64::INFINITY, 40.0],
            indentations,
            trials: 6,
            seed: Some(1),
            contact_axis: [0.0, 0.0, 1.0],
        }
    }
}

impl Protocol {
    pub fn contact_axis(&self) -> Vec3 {
        Vec3::from(self.contact_axis)
    }
}

/// Inverse pipeline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub blur_sigma: f64,
    pub segment: SegmentParams,
    pub singular_cutoff: f64,
    /// Contact detection threshold on the reconstructed field, mm.
    pub noise_floor: f64,
    /// Estimates below this indentation are flagged as noise dominated, mm.
    pub flag_below: f64,
    /// Resample sub-images on the tangent plane of each marker's view ray.
    pub rectify_sub_images: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            segment: SegmentParams::default(),
            singular_cutoff: crate::calibration::SINGULAR_CUTOFF,
            noise_floor: crate::estimation::NOISE_FLOOR,
            flag_below: 1.0,
            rectify_sub_images: true,
        }
    }
}

/// Thresholds applied by `evaluate --check`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Only indentations at or above this depth are checked, mm.
    pub min_indentation: f64,
    /// Allowed `|κ̂|` for flat objects, 1/mm.
    pub flat_tolerance: f64,
    /// Allowed `|κ̂ − κ|` relative to `|κ|` for curved objects.
    pub relative_tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            min_indentation: 2.0,
            flat_tolerance: 1.0 / 200.0,
            relative_tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sensor: SensorGeometry,
    pub mechanics: ForwardModel,
    pub camera: CameraModel,
    pub optics: OpticalFilterModel,
    pub render: RenderSettings,
    pub protocol: Protocol,
    pub pipeline: PipelineConfig,
    pub check: CheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sensor: SensorGeometry::default(),
            mechanics: ForwardModel::default(),
            camera: CameraModel::default(),
            optics: OpticalFilterModel::default(),
            render: RenderSettings::default(),
            protocol: Protocol::default(),
            pipeline: PipelineConfig::default(),
            check: CheckConfig::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::GeometryInfeasible(m) => Error::Config(m),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.sensor.validate().map_err(config_err)?;
        self.mechanics
            .validate(self.sensor.layer_separation)
            .map_err(config_err)?;
        self.camera.validate().map_err(config_err)?;
        self.optics.validate().map_err(config_err)?;
        self.render.validate().map_err(config_err)?;
        self.pipeline.segment.validate().map_err(config_err)?;

        let p = &self.protocol;
        if p.indentations.is_empty() {
            return Err(Error::Config("indentation schedule is empty".into()));
        }
        if p.indentations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Config(
                "indentations must be finite and non-negative".into(),
            ));
        }
        if p.indentations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "indentation schedule must be strictly increasing".into(),
            ));
        }
        if p.object_radii.is_empty() {
            return Err(Error::Config("no object radii given".into()));
        }
        let deepest = *p.indentations.last().expect("non-empty");
        for &r in &p.object_radii {
            ContactScenario::new(r, deepest, self.sensor.outer_radius)
                .and_then(|s| s.equivalent_radius())
                .map_err(config_err)?;
        }
        if p.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.render.noise_sigma > 0.0 && p.seed.is_none() {
            return Err(Error::Config(
                "a seed is required when noise_sigma > 0".into(),
            ));
        }
        normalized_axis(&p.contact_axis()).map_err(config_err)?;

        let pl = &self.pipeline;
        if !(pl.blur_sigma >= 0.0 && pl.blur_sigma.is_finite()) {
            return Err(Error::Config("blur_sigma must be >= 0".into()));
        }
        if !(pl.singular_cutoff > 0.0 && pl.singular_cutoff < 1.0) {
            return Err(Error::Config("singular_cutoff must be in (0, 1)".into()));
        }
        if !(pl.noise_floor >= 0.0 && pl.flag_below >= 0.0) {
            return Err(Error::Config(
                "noise_floor and flag_below must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.protocol.seed.unwrap_or(0)
    }

    /// Hash of everything that shapes the rendered frames: sensor,
    /// mechanics, camera, optics and lighting. The protocol, seed and noise
    /// level are left out, so datasets of one setup with different seeds or
    /// noise are interchangeable.
    pub fn setup_hash(&self) -> String {
        sha256_hex(self.setup_json().to_string().as_bytes())
    }

    /// Setup plus pipeline settings; a calibration is only valid for the
    /// combination it was fitted with.
    pub fn compat_hash(&self) -> String {
        let mut v = self.setup_json();
        v["pipeline"] = serde_json::json!(self.pipeline);
        sha256_hex(v.to_string().as_bytes())
    }

    fn setup_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": self.schema_version,
            "sensor": self.sensor,
            "mechanics": self.mechanics,
            "camera": self.camera,
            "optics": self.optics,
            "lighting_falloff": self.render.lighting_falloff,
            "supersampling": self.render.supersampling,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

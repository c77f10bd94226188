//! Dataset simulation, calibration and evaluation commands.
//!
//! A dataset directory holds one sub-directory per object and trial:
//!
//! ```text
//! <out>/manifest.json
//! <out>/<object>/trial_<k>/baseline.png
//! <out>/<object>/trial_<k>/frame_<indentation>.png
//! ```
//!
//! The manifest records the setup hash, seed, scenario of every frame and the
//! SHA-256 of every file. Calibration and evaluation refuse datasets whose
//! setup hash differs from the configuration in use.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    feature_count, sample_vector, CalibrationMatrix, CalibrationMeta, LeastSquares,
};
use crate::config::{sha256_hex, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_curvature, fit_gaussian, reconstruct_field, CurvatureEstimate, GaussianFit,
};
use crate::geometry::{build_layout, MarkerLayout};
use crate::imaging::{
    match_centroids, rgb_to_hsv, segment_markers, FlatField, MarkerObservation, SubImage,
};
use crate::mechanics::{
    distance_from_axis, marker_displacements, solve_contact, subsurface_normal_field,
    ContactScenario, MarkerDisplacement,
};
use crate::renderer::{projected_marker_centers, render_frame, RasterImage, RenderSettings};
use crate::text::sig9;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "tactwin-dataset/1";

/// Directory-safe name of an object: `flat`, `convex_40`, `concave_12p5`.
pub fn object_name(radius: f64) -> String {
    if radius.is_infinite() {
        return "flat".into();
    }
    let kind = if radius > 0.0 { "convex" } else { "concave" };
    let magnitude = radius.abs();
    let text = if magnitude.fract() == 0.0 {
        format!("{magnitude:.0}")
    } else {
        format!("{magnitude}").replace('.', "p")
    };
    format!("{kind}_{text}")
}

fn frame_file(indentation: f64) -> String {
    format!("frame_{indentation:05.2}.png")
}

fn trial_dir(object: &str, trial: usize) -> String {
    format!("{object}/trial_{trial}")
}

/// Noise seed of one frame, derived from the dataset seed.
fn frame_seed(seed: u64, object: usize, trial: usize, frame: usize) -> u64 {
    let digest = sha256_hex(format!("{seed}/{object}/{trial}/{frame}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub name: String,
    /// Signed radius in mm, `None` for a flat object.
    pub radius_mm: Option<f64>,
}

impl ObjectEntry {
    pub fn radius(&self) -> f64 {
        self.radius_mm.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub object: usize,
    pub trial: usize,
    /// `None` for the baseline frame.
    pub indentation_mm: Option<f64>,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub setup_hash: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub noise_sigma: f64,
    pub objects: Vec<ObjectEntry>,
    pub trials: usize,
    pub indentations_mm: Vec<f64>,
    pub contact_axis: [f64; 3],
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    fn frame(&self, object: usize, trial: usize, indentation: Option<f64>) -> Result<&FrameEntry> {
        self.frames
            .iter()
            .find(|f| f.object == object && f.trial == trial && f.indentation_mm == indentation)
            .ok_or_else(|| {
                Error::Data(format!(
                    "manifest has no frame for object {object}, trial {trial}, indentation {indentation:?}"
                ))
            })
    }
}

/// A simulated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    manifest_hash: String,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!(
                "{}: unsupported dataset format {:?}",
                path.display(),
                manifest.format
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            manifest_hash: sha256_hex(&bytes),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Refuses datasets produced with a different setup.
    pub fn check_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let expected = cfg.setup_hash();
        if self.manifest.setup_hash != expected {
            return Err(Error::Config(format!(
                "dataset {} was simulated with setup hash {}, configuration has {expected}",
                self.root.display(),
                self.manifest.setup_hash
            )));
        }
        Ok(())
    }

    /// Reads a frame and verifies its checksum.
    pub fn load_frame(&self, entry: &FrameEntry) -> Result<RasterImage> {
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Data(format!(
                "{}: checksum mismatch",
                path.display()
            )));
        }
        RasterImage::decode_png(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn ensure_empty_or_forced(out: &Path, force: bool) -> Result<()> {
    match fs::read_dir(out) {
        Ok(mut entries) => {
            if entries.next().is_some() && !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    out.display()
                )));
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(out, e)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    write_file(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn render_settings(cfg: &ExperimentConfig, seed: u64) -> RenderSettings {
    RenderSettings { seed, ..cfg.render }
}

/// Renders the sensor under one scenario (or at rest for `None`).
pub fn render_scenario(
    cfg: &ExperimentConfig,
    layout: &MarkerLayout,
    scenario: Option<&ContactScenario>,
    seed: u64,
) -> Result<RasterImage> {
    let displacements = match scenario {
        Some(s) => marker_displacements(layout, s, &cfg.protocol.contact_axis(), &cfg.mechanics)?,
        None => vec![MarkerDisplacement::ZERO; layout.len()],
    };
    render_frame(
        layout,
        &displacements,
        cfg.sensor.marker_radius,
        &cfg.camera,
        &cfg.optics,
        &render_settings(cfg, seed),
    )
}

fn scenario(cfg: &ExperimentConfig, radius: f64, indentation: f64) -> Result<ContactScenario> {
    ContactScenario::new(radius, indentation, cfg.sensor.outer_radius)
}

/// Writes `layout.csv` and a rest-state `preview.png` into `out`.
pub fn cmd_generate_layout(cfg: &ExperimentConfig, out: &Path) -> Result<MarkerLayout> {
    cfg.validate()?;
    let layout = build_layout(&cfg.sensor).map_err(|e| Error::Config(e.to_string()))?;
    let preview = render_scenario(cfg, &layout, None, cfg.seed())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = Vec::new();
    layout.write_csv(&mut csv).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("layout.csv"), &csv)?;
    preview.write_png(&out.join("preview.png"))?;
    Ok(layout)
}

/// Renders the full protocol into `out` and returns the manifest.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    ensure_empty_or_forced(out, force)?;
    let layout = build_layout(&cfg.sensor)?;
    let seed = cfg.seed();
    let p = &cfg.protocol;
    let objects: Vec<ObjectEntry> = p
        .object_radii
        .iter()
        .map(|&r| ObjectEntry {
            name: object_name(r),
            radius_mm: r.is_finite().then_some(r),
        })
        .collect();

    let mut frames = Vec::new();
    for (oi, object) in objects.iter().enumerate() {
        for trial in 1..=p.trials {
            let dir = trial_dir(&object.name, trial);
            let mut jobs: Vec<(Option<f64>, String)> = vec![(None, format!("{dir}/baseline.png"))];
            jobs.extend(
                p.indentations
                    .iter()
                    .map(|&d| (Some(d), format!("{dir}/{}", frame_file(d)))),
            );
            let rendered: Vec<Result<FrameEntry>> = jobs
                .into_par_iter()
                .enumerate()
                .map(|(fi, (indentation, rel))| {
                    let fseed = frame_seed(seed, oi, trial, fi);
                    let sc = indentation
                        .map(|d| scenario(cfg, object.radius(), d))
                        .transpose()?;
                    let img = render_scenario(cfg, &layout, sc.as_ref(), fseed)?;
                    let mut png = Vec::new();
                    img.encode_png(&mut png)?;
                    write_file(&out.join(&rel), &png)?;
                    Ok(FrameEntry {
                        path: rel,
                        object: oi,
                        trial,
                        indentation_mm: indentation,
                        seed: fseed,
                        sha256: sha256_hex(&png),
                    })
                })
                .collect();
            for r in rendered {
                frames.push(r?);
            }
        }
    }

    let config_text = cfg.to_toml_string()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        setup_hash: cfg.setup_hash(),
        config_hash: sha256_hex(config_text.as_bytes()),
        seed: p.seed,
        noise_sigma: cfg.render.noise_sigma,
        objects,
        trials: p.trials,
        indentations_mm: p.indentations.clone(),
        contact_axis: p.contact_axis,
        frames,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&out.join(MANIFEST_FILE), &json)?;
    log::info!(
        "simulated {} frames into {}",
        manifest.frames.len(),
        out.display()
    );
    Ok(manifest)
}

/// Markers seen in one frame, tracked to layout indices.
#[derive(Debug, Clone)]
pub struct FrameObservations {
    /// `None` for the baseline.
    pub indentation: Option<f64>,
    /// Sorted by marker index.
    pub markers: Vec<(usize, MarkerObservation)>,
}

/// All frames of one object and trial, baseline first.
#[derive(Debug, Clone)]
pub struct TrialObservations {
    pub object: usize,
    pub trial: usize,
    pub frames: Vec<FrameObservations>,
}

impl TrialObservations {
    pub fn baseline(&self) -> &FrameObservations {
        &self.frames[0]
    }
}

/// Half of the smallest distance between any two points.
fn half_min_spacing(points: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.min((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    if best.is_finite() {
        best / 2.0
    } else {
        f64::MAX
    }
}

/// The inverse front end shared by calibration and evaluation.
pub struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    layout: MarkerLayout,
    /// Projected rest centres of the markers the camera sees.
    rest: Vec<(usize, [f64; 2])>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let layout = build_layout(&cfg.sensor)?;
        let zero = vec![MarkerDisplacement::ZERO; layout.len()];
        let rest = projected_marker_centers(&layout, &zero, &cfg.camera)?
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect();
        Ok(Self { cfg, layout, rest })
    }

    pub fn layout(&self) -> &MarkerLayout {
        &self.layout
    }

    /// Blur, flat-field, segment.
    pub fn observe(&self, frame: &RasterImage, flat: &FlatField) -> Result<Vec<MarkerObservation>> {
        let pre = flat.apply(frame)?;
        let mut obs = segment_markers(&rgb_to_hsv(&pre), &pre, &self.cfg.pipeline.segment)?;
        if self.cfg.pipeline.rectify_sub_images {
            let size = self.cfg.pipeline.segment.window;
            for o in &mut obs {
                o.sub_image = SubImage::rectified(&pre, &self.cfg.camera, o.centroid, size);
            }
        }
        Ok(obs)
    }

    /// Associates observations with marker indices by nearest match against
    /// `reference` positions.
    fn track(
        &self,
        observations: Vec<MarkerObservation>,
        reference: &[(usize, [f64; 2])],
    ) -> Result<Vec<(usize, MarkerObservation)>> {
        let ref_pts: Vec<[f64; 2]> = reference.iter().map(|r| r.1).collect();
        let cur_pts: Vec<[f64; 2]> = observations.iter().map(|o| o.centroid).collect();
        let m = match_centroids(&cur_pts, &ref_pts, half_min_spacing(&ref_pts))?;
        let mut slots: Vec<Option<MarkerObservation>> =
            observations.into_iter().map(Some).collect();
        let mut out: Vec<(usize, MarkerObservation)> = m
            .pairs
            .iter()
            .map(|&(c, r)| (reference[r].0, slots[c].take().expect("injective matching")))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        Ok(out)
    }

    /// Baseline followed by the indentation schedule, each frame's markers
    /// tracked from the previous frame.
    pub fn observe_frames(
        &self,
        baseline: &RasterImage,
        frames: &[(f64, RasterImage)],
    ) -> Result<Vec<FrameObservations>> {
        let flat = FlatField::from_baseline(baseline, self.cfg.pipeline.blur_sigma)?;
        let base_obs = self.observe(baseline, &flat)?;
        let raw: Vec<Vec<MarkerObservation>> = frames
            .par_iter()
            .map(|(_, img)| self.observe(img, &flat))
            .collect::<Result<_>>()?;

        let base = self.track(base_obs, &self.rest)?;
        let mut reference: Vec<(usize, [f64; 2])> =
            base.iter().map(|(i, o)| (*i, o.centroid)).collect();
        let mut out = vec![FrameObservations {
            indentation: None,
            markers: base,
        }];
        for ((d, _), obs) in frames.iter().zip(raw) {
            let tracked = self.track(obs, &reference)?;
            for (i, o) in &tracked {
                if let Ok(k) = reference.binary_search_by_key(i, |r| r.0) {
                    reference[k].1 = o.centroid;
                }
            }
            out.push(FrameObservations {
                indentation: Some(*d),
                markers: tracked,
            });
        }
        Ok(out)
    }

    /// Loads and observes one trial of a dataset.
    pub fn observe_trial(
        &self,
        dataset: &Dataset,
        object: usize,
        trial: usize,
    ) -> Result<TrialObservations> {
        let m = dataset.manifest();
        let baseline = dataset.load_frame(m.frame(object, trial, None)?)?;
        let frames: Vec<(f64, RasterImage)> = m
            .indentations_mm
            .iter()
            .map(|&d| Ok((d, dataset.load_frame(m.frame(object, trial, Some(d))?)?)))
            .collect::<Result<_>>()?;
        let frames = self
            .observe_frames(&baseline, &frames)
            .map_err(|e| Error::Data(format!("{} trial {trial}: {e}", m.objects[object].name)))?;
        Ok(TrialObservations {
            object,
            trial,
            frames,
        })
    }

    /// Sample columns and ground-truth targets of every tracked marker.
    pub fn training_samples(
        &self,
        obs: &TrialObservations,
        object_radius: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let cam = &self.cfg.camera;
        let axis = self.cfg.protocol.contact_axis();
        let mut columns = Vec::new();
        let mut targets = Vec::new();
        for frame in &obs.frames {
            let field = match frame.indentation {
                Some(d) if d > 0.0 => {
                    let s = scenario(self.cfg, object_radius, d)?;
                    Some(subsurface_normal_field(&solve_contact(&s)?))
                }
                _ => None,
            };
            for (i, o) in &frame.markers {
                columns.push(sample_vector(o, cam.width, cam.height)?);
                let r = distance_from_axis(&self.layout.inner_positions()[*i], &axis);
                targets.push(field.as_ref().map_or(0.0, |f| f.normal(r)));
            }
        }
        Ok((columns, targets))
    }
}

/// Held-out residual of one object across the leave-one-trial-out folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectResidual {
    pub object: String,
    pub training_rms_mm: f64,
    pub heldout_rms_mm: Option<f64>,
    /// Held-out RMS of a calibration trained on this object alone.
    pub specific_heldout_rms_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub features: usize,
    pub rank: usize,
    pub training_rms_mm: f64,
    /// Leave-one-trial-out RMS over all samples, when there are ≥ 2 trials.
    pub heldout_rms_mm: Option<f64>,
    pub per_object: Vec<ObjectResidual>,
}

/// Prefix and suffix merges over `parts`: the total, and for each part the
/// accumulator of all the others.
fn leave_one_out(
    parts: &[&LeastSquares],
    features: usize,
) -> Result<(LeastSquares, Vec<LeastSquares>)> {
    let n = parts.len();
    let mut prefix = vec![LeastSquares::new(features)];
    for p in parts {
        let mut acc = prefix[prefix.len() - 1].clone();
        acc.merge(p)?;
        prefix.push(acc);
    }
    let mut suffix = vec![LeastSquares::new(features); n + 1];
    for k in (0..n).rev() {
        let mut acc = suffix[k + 1].clone();
        acc.merge(parts[k])?;
        suffix[k] = acc;
    }
    let others = (0..n)
        .map(|k| {
            let mut acc = prefix[k].clone();
            acc.merge(&suffix[k + 1])?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok((prefix.pop().expect("non-empty prefix"), others))
}

/// Held-out residual of `blocks[group][trial]` under the fit to each
/// trial's complement; returns the summed squared residual and sample count
/// per group.
fn held_out_scores(
    blocks: &[Vec<LeastSquares>],
    complements: &[LeastSquares],
    groups: &[usize],
    cutoff: f64,
) -> Result<Vec<(f64, usize)>> {
    let mut scores = vec![(0.0, 0usize); groups.len()];
    for (k, training) in complements.iter().enumerate() {
        let (coef, _) = training.solve(cutoff)?;
        for (g, &o) in groups.iter().enumerate() {
            let held = &blocks[o][k];
            scores[g].0 += held.residual_sum_sq(&coef)?;
            scores[g].1 += held.samples();
        }
    }
    Ok(scores)
}

fn rms((sum, n): (f64, usize)) -> Option<f64> {
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Fits the calibration on every frame of the dataset and writes it to
/// `out` with a JSON report alongside. Nothing is written on failure.
pub fn cmd_calibrate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out: &Path,
) -> Result<(CalibrationMatrix, CalibrationReport)> {
    cfg.validate()?;
    let dataset = Dataset::open(dataset_dir)?;
    dataset.check_config(cfg)?;
    let pipeline = Pipeline::new(cfg)?;
    let m = dataset.manifest();
    let window = cfg.pipeline.segment.window;
    let features = feature_count(window);
    let cutoff = cfg.pipeline.singular_cutoff;

    let mut blocks: Vec<Vec<LeastSquares>> = Vec::new();
    let mut scenarios = Vec::new();
    let mut any_target = false;
    for (oi, object) in m.objects.iter().enumerate() {
        let mut per_trial = Vec::new();
        for trial in 1..=m.trials {
            let obs = pipeline.observe_trial(&dataset, oi, trial)?;
            let (columns, targets) = pipeline.training_samples(&obs, object.radius())?;
            any_target |= targets.iter().any(|&t| t != 0.0);
            let mut acc = LeastSquares::new(features);
            acc.push(&columns, &targets)?;
            per_trial.push(acc);
            for f in &obs.frames {
                scenarios.push(match f.indentation {
                    Some(d) => format!("{}/trial_{trial}/{}", object.name, sig9(d)),
                    None => format!("{}/trial_{trial}/baseline", object.name),
                });
            }
            log::info!("calibrate: {} trial {trial} observed", object.name);
        }
        blocks.push(per_trial);
    }
    if !any_target {
        return Err(Error::Data(
            "degenerate dataset: every ground-truth displacement is zero".into(),
        ));
    }

    // one accumulator per trial index, pooled over objects
    let by_trial: Vec<LeastSquares> = (0..m.trials)
        .map(|t| {
            let mut acc = LeastSquares::new(features);
            for per_trial in &blocks {
                acc.merge(&per_trial[t])?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (everything, complements) = leave_one_out(&by_trial.iter().collect::<Vec<_>>(), features)?;
    let (coefficients, rank) = everything.solve(cutoff)?;
    let training_rms = everything.rms(&coefficients)?;

    let all: Vec<usize> = (0..m.objects.len()).collect();
    let loto = m.trials >= 2;
    let pooled = if loto {
        held_out_scores(&blocks, &complements, &all, cutoff)?
    } else {
        vec![(0.0, 0); all.len()]
    };
    let mut per_object = Vec::new();
    for (oi, object) in m.objects.iter().enumerate() {
        let (own, own_complements) =
            leave_one_out(&blocks[oi].iter().collect::<Vec<_>>(), features)?;
        let specific = if loto && m.objects.len() > 1 {
            rms(held_out_scores(&blocks, &own_complements, &[oi], cutoff)?[0])
        } else {
            None
        };
        per_object.push(ObjectResidual {
            object: object.name.clone(),
            training_rms_mm: own.rms(&coefficients)?,
            heldout_rms_mm: rms(pooled[oi]),
            specific_heldout_rms_mm: specific,
        });
    }
    let total = pooled
        .iter()
        .fold((0.0, 0), |acc, s| (acc.0 + s.0, acc.1 + s.1));

    let mut meta = CalibrationMeta::new(window, cfg.camera.width, cfg.camera.height);
    meta.singular_cutoff = cutoff;
    meta.rank = rank;
    meta.samples = everything.samples();
    meta.training_rms = training_rms;
    meta.compat_hash = cfg.compat_hash();
    meta.manifest_hash = dataset.manifest_hash().to_string();
    meta.scenarios = scenarios;
    let calibration = CalibrationMatrix::new(coefficients, meta)?;
    let report = CalibrationReport {
        samples: everything.samples(),
        features,
        rank,
        training_rms_mm: training_rms,
        heldout_rms_mm: if loto { rms(total) } else { None },
        per_object,
    };

    let mut cal_bytes = Vec::new();
    calibration
        .write(&mut cal_bytes)
        .map_err(|e| Error::io(out, e))?;
    let report_bytes =
        serde_json::to_vec_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(out, &cal_bytes)?;
    write_atomic(&report_path(out), &report_bytes)?;
    Ok((calibration, report))
}

/// `<calibration>.report.json`.
pub fn report_path(calibration: &Path) -> PathBuf {
    let mut p = calibration.as_os_str().to_owned();
    p.push(".report.json");
    PathBuf::from(p)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub object: String,
    pub trial: usize,
    pub object_radius_mm: f64,
    pub indentation_mm: f64,
    pub a_mm: f64,
    pub delta_r_mm: f64,
    pub r_eq_mm: f64,
    pub kappa_o_inv_mm: f64,
    pub residual_mm: f64,
    /// `ok`, `low_indentation`, `no_contact`, `insufficient_data` or `fit_failed`.
    pub flag: String,
}

/// Statistics of the curvature estimates over trials at one indentation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub object: String,
    pub object_radius_mm: f64,
    pub indentation_mm: f64,
    pub true_kappa_inv_mm: f64,
    pub estimates: usize,
    pub mean_kappa_inv_mm: f64,
    pub stddev_kappa_inv_mm: f64,
    /// `None` where the indentation is below the checked range.
    pub within_tolerance: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<EstimateRow>,
    pub summary: Vec<SummaryRow>,
    pub violations: Vec<String>,
}

impl EvaluationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Fit and curvature of one frame, or the flag naming why there is none.
fn estimate_frame(
    cfg: &ExperimentConfig,
    calibration: &CalibrationMatrix,
    layout: &MarkerLayout,
    frame: &FrameObservations,
) -> std::result::Result<(GaussianFit, CurvatureEstimate), &'static str> {
    let axis = cfg.protocol.contact_axis();
    let field = reconstruct_field(calibration, &frame.markers, layout, &axis)
        .map_err(|_| "insufficient_data")?;
    let fit = fit_gaussian(&field, cfg.pipeline.noise_floor).map_err(|e| match e {
        Error::NoContact { .. } => "no_contact",
        Error::InsufficientData(_) => "insufficient_data",
        _ => "fit_failed",
    })?;
    let curvature = estimate_curvature(&fit, cfg.sensor.outer_radius).map_err(|_| "fit_failed")?;
    Ok((fit, curvature))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-object, per-indentation statistics and the acceptance check.
pub fn summarize(cfg: &ExperimentConfig, rows: &[EstimateRow]) -> (Vec<SummaryRow>, Vec<String>) {
    let check = &cfg.check;
    let mut summary = Vec::new();
    let mut violations = Vec::new();
    let mut objects: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !objects.iter().any(|o| o.0 == r.object) {
            objects.push((r.object.clone(), r.object_radius_mm));
        }
    }
    for (name, radius) in objects {
        let truth = 1.0 / radius;
        let mut depths: Vec<f64> = rows
            .iter()
            .filter(|r| r.object == name)
            .map(|r| r.indentation_mm)
            .collect();
        depths.sort_by(f64::total_cmp);
        depths.dedup();
        for d in depths {
            let est: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.object == name && r.indentation_mm == d && r.kappa_o_inv_mm.is_finite()
                })
                .map(|r| r.kappa_o_inv_mm)
                .collect();
            let (mean, std) = mean_std(&est);
            let within = (d >= check.min_indentation).then(|| {
                let tolerance = if truth == 0.0 {
                    check.flat_tolerance
                } else {
                    check.relative_tolerance * truth.abs()
                };
                (mean - truth).abs() <= tolerance
            });
            if within == Some(false) {
                violations.push(format!(
                    "{name} at {} mm: mean curvature {} 1/mm, expected {} 1/mm",
                    sig9(d),
                    sig9(mean),
                    sig9(truth)
                ));
            }
            summary.push(SummaryRow {
                object: name.clone(),
                object_radius_mm: radius,
                indentation_mm: d,
                true_kappa_inv_mm: truth,
                estimates: est.len(),
                mean_kappa_inv_mm: mean,
                stddev_kappa_inv_mm: std,
                within_tolerance: within,
            });
        }
    }
    (summary, violations)
}

pub fn write_results_csv<W: Write>(rows: &[EstimateRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "trial,object_radius_mm,indentation_mm,a_mm,delta_r_mm,R_eq_mm,kappa_o_inv_mm,residual_mm,flag"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.trial,
            sig9(r.object_radius_mm),
            sig9(r.indentation_mm),
            sig9(r.a_mm),
            sig9(r.delta_r_mm),
            sig9(r.r_eq_mm),
            sig9(r.kappa_o_inv_mm),
            sig9(r.residual_mm),
            r.flag
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "object,object_radius_mm,indentation_mm,true_kappa_inv_mm,estimates,mean_kappa_inv_mm,stddev_kappa_inv_mm,within_tolerance"
    )?;
    for r in rows {
        let within = match r.within_tolerance {
            Some(true) => "yes",
            Some(false) => "no",
            None => "",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{within}",
            r.object,
            sig9(r.object_radius_mm),
            sig9(r.indentation_mm),
            sig9(r.true_kappa_inv_mm),
            r.estimates,
            sig9(r.mean_kappa_inv_mm),
            sig9(r.stddev_kappa_inv_mm),
        )?;
    }
    Ok(())
}

/// Observation dump with centroid motion relative to the baseline.
fn write_observations<W: Write>(
    trial_name: &str,
    obs: &TrialObservations,
    out: &mut W,
) -> std::io::Result<()> {
    let base = &obs.baseline().markers;
    for frame in &obs.frames {
        let frame_id = match frame.indentation {
            Some(d) => format!("{trial_name}/{}", frame_file(d).trim_end_matches(".png")),
            None => format!("{trial_name}/baseline"),
        };
        for (i, o) in &frame.markers {
            let (dx, dy) = match base.binary_search_by_key(i, |b| b.0) {
                Ok(k) => (
                    o.centroid[0] - base[k].1.centroid[0],
                    o.centroid[1] - base[k].1.centroid[1],
                ),
                Err(_) => (f64::NAN, f64::NAN),
            };
            writeln!(
                out,
                "{frame_id},{i},{},{},{},{},{},{}",
                sig9(o.centroid[0]),
                sig9(o.centroid[1]),
                o.pixel_count,
                sig9(o.mean_hue),
                sig9(dx),
                sig9(dy)
            )?;
        }
    }
    Ok(())
}

/// Estimates the curvature in every indented frame and writes
/// `results.csv`, `summary.csv` and `observations.csv` into `out`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    calibration_path: &Path,
    out: &Path,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    let dataset = Dataset::open(dataset_dir)?;
    dataset.check_config(cfg)?;
    let calibration = CalibrationMatrix::load(calibration_path)?;
    calibration.check_compatible(
        cfg.pipeline.segment.window,
        cfg.camera.width,
        cfg.camera.height,
        &cfg.compat_hash(),
    )?;
    let pipeline = Pipeline::new(cfg)?;
    let m = dataset.manifest();

    let mut rows = Vec::new();
    let mut observations = Vec::new();
    writeln!(
        observations,
        "frame_id,marker_index,cx,cy,pixel_count,mean_hue,dx,dy"
    )
    .map_err(|e| Error::io(out, e))?;
    for (oi, object) in m.objects.iter().enumerate() {
        for trial in 1..=m.trials {
            let obs = pipeline.observe_trial(&dataset, oi, trial)?;
            write_observations(&trial_dir(&object.name, trial), &obs, &mut observations)
                .map_err(|e| Error::io(out, e))?;
            for frame in &obs.frames[1..] {
                let d = frame.indentation.expect("indented frame");
                let nan = f64::NAN;
                let (a, delta, r_eq, kappa, residual, mut flag) =
                    match estimate_frame(cfg, &calibration, pipeline.layout(), frame) {
                        Ok((fit, c)) => (
                            fit.width,
                            fit.amplitude,
                            c.equivalent_radius,
                            c.object_curvature,
                            fit.rms_residual,
                            "ok",
                        ),
                        Err(flag) => (nan, nan, nan, nan, nan, flag),
                    };
                if flag == "ok" && d < cfg.pipeline.flag_below {
                    flag = "low_indentation";
                }
                rows.push(EstimateRow {
                    object: object.name.clone(),
                    trial,
                    object_radius_mm: object.radius(),
                    indentation_mm: d,
                    a_mm: a,
                    delta_r_mm: delta,
                    r_eq_mm: r_eq,
                    kappa_o_inv_mm: kappa,
                    residual_mm: residual,
                    flag: flag.into(),
                });
            }
            log::info!("evaluate: {} trial {trial} done", object.name);
        }
    }
    let (summary, violations) = summarize(cfg, &rows);

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut results = Vec::new();
    write_results_csv(&rows, &mut results).map_err(|e| Error::io(out, e))?;
    let mut summary_bytes = Vec::new();
    write_summary_csv(&summary, &mut summary_bytes).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("results.csv"), &results)?;
    write_atomic(&out.join("summary.csv"), &summary_bytes)?;
    let mut w = BufWriter::new(Vec::new());
    w.write_all(&observations).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("observations.csv"), w.get_ref())?;

    Ok(EvaluationReport {
        rows,
        summary,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names() {
        assert_eq!(object_name(f64::INFINITY), "flat");
        assert_eq!(object_name(40.0), "convex_40");
        assert_eq!(object_name(-40.0), "concave_40");
        assert_eq!(object_name(12.5), "convex_12p5");
        assert_eq!(frame_file(2.0), "frame_02.00.png");
        assert_eq!(frame_file(10.0), "frame_10.00.png");
        assert_eq!(frame_file(0.5), "frame_00.50.png");
    }

    #[test]
    fn frame_seeds_differ() {
        let a = frame_seed(1, 0, 1, 0);
        assert_eq!(a, frame_seed(1, 0, 1, 0));
        assert_ne!(a, frame_seed(1, 0, 1, 1));
        assert_ne!(a, frame_seed(2, 0, 1, 0));
    }

    #[test]
    fn spacing() {
        assert_eq!(
            half_min_spacing(&[[0.0, 0.0], [4.0, 0.0], [0.0, 10.0]]),
            2.0
        );
    }

    #[test]
    fn summary_checks_means() {
        let cfg = ExperimentConfig::default();
        let row = |object: &str, radius: f64, d: f64, k: f64| EstimateRow {
            object: object.into(),
            trial: 1,
            object_radius_mm: radius,
            indentation_mm: d,
            a_mm: 0.0,
            delta_r_mm: 0.0,
            r_eq_mm: 0.0,
            kappa_o_inv_mm: k,
            residual_mm: 0.0,
            flag: "ok".into(),
        };
        let rows = vec![
            row("flat", f64::INFINITY, 1.0, 0.5),
            row("flat", f64::INFINITY, 2.0, 0.004),
            row("flat", f64::INFINITY, 2.0, -0.002),
            row("convex_40", 40.0, 2.0, 0.03),
        ];
        let (summary, violations) = summarize(&cfg, &rows);
        assert_eq!(summary.len(), 3);
        assert_eq!(summary[0].within_tolerance, None);
        assert_eq!(summary[1].within_tolerance, Some(true));
        assert!((summary[1].mean_kappa_inv_mm - 0.001).abs() < 1e-15);
        assert_eq!(summary[2].within_tolerance, Some(false));
        assert_eq!(violations.len(), 1);
    }
}

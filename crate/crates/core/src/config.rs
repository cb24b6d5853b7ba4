//! Pipeline configuration: JSON file, named presets and dotted-path overrides.
//!
//! Precedence is `--set` overrides, then the config file, then the preset (or
//! built-in defaults). Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffgeo::StencilParams;
use crate::error::{Error, Result};
use crate::field::{LossMode, LossWeights, TrainConfig};
use crate::grid::{Association, WeightDecay};
use crate::render::Shape;
use crate::sampler::{SamplerConfig, SamplingMode, ThresholdMethod};
use crate::tracking::TrackingParams;

pub const PRESETS: [&str; 2] = ["sparse64", "dense256"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub source: SourceConfig,
    pub grid: GridConfig,
    pub tracking: TrackingConfig,
    pub sampler: SamplerSection,
    pub training: TrainingSection,
    pub extraction: ExtractionConfig,
    pub evaluation: EvaluationConfig,
    pub noise: NoiseConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("out"),
            source: SourceConfig::Synthetic(SyntheticSource::default()),
            grid: GridConfig::default(),
            tracking: TrackingConfig::default(),
            sampler: SamplerSection::default(),
            training: TrainingSection::default(),
            extraction: ExtractionConfig::default(),
            evaluation: EvaluationConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceConfig {
    Synthetic(SyntheticSource),
    Dataset(DatasetSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLayout {
    /// Directions spread over the whole sphere.
    #[default]
    Fibonacci,
    /// A ring of cameras at fixed elevation.
    Orbit,
    /// An arc covering only half of the object.
    Hemisphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub shape: Shape,
    pub views: usize,
    pub layout: ViewLayout,
    /// Camera distance from the grid center.
    pub distance: f64,
    pub elevation_deg: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource {
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: 0.2,
            },
            views: 12,
            layout: ViewLayout::Fibonacci,
            distance: 0.7,
            elevation_deg: 20.0,
            width: 160,
            height: 120,
            fov_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    /// Directory of 16-bit depth images, read in file-name order.
    pub depth_dir: PathBuf,
    /// Camera trajectory; required unless tracking is enabled.
    pub trajectory: Option<PathBuf>,
    pub intrinsics: PathBuf,
    /// Overrides the scale stored with the intrinsics.
    pub depth_scale: Option<f64>,
    /// Use every `stride`-th frame.
    pub stride: Option<usize>,
    pub max_frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub truncation: u32,
    pub center: [f64; 3],
    pub decay: WeightDecay,
    pub association: Association,
    pub max_depth_jump: f64,
    pub min_incidence_cos: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [64; 3],
            voxel_size: 0.008,
            truncation: 5,
            center: [0.0; 3],
            decay: WeightDecay::Inside,
            association: Association::Nearest,
            max_depth_jump: StencilParams::default().max_depth_jump,
            min_incidence_cos: StencilParams::default().min_incidence_cos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    /// Estimate poses instead of trusting the trajectory (the first frame
    /// keeps its given pose, or identity).
    pub enabled: bool,
    pub params: TrackingParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Samples per curvature class; defaults to a quarter of the batch.
    pub m: Option<usize>,
    /// Unobserved-space samples; defaults to a quarter of the batch.
    pub m_unobs: Option<usize>,
    pub q_lo: f64,
    pub q_hi: f64,
    pub threshold_method: ThresholdMethod,
    pub weight_saturation: f64,
    pub mode: SamplingMode,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            m: None,
            m_unobs: None,
            q_lo: s.q_lo,
            q_hi: s.q_hi,
            threshold_method: s.threshold_method,
            weight_saturation: s.weight_saturation,
            mode: s.mode,
        }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            q_lo: self.q_lo,
            q_hi: self.q_hi,
            threshold_method: self.threshold_method,
            weight_saturation: self.weight_saturation,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub uncertainty_lr_scale: f64,
    pub decay_every: Option<usize>,
    pub tau_n: f64,
    pub tau_w: f64,
    pub tau_e: f64,
    pub mode: LossMode,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let loss = LossWeights::default();
        TrainingSection {
            layers: 4,
            width: 128,
            epochs: 2000,
            batch: 2048,
            lr: 1e-3,
            lr_decay: 0.5,
            uncertainty_lr_scale: TrainConfig::default().uncertainty_lr_scale,
            decay_every: None,
            tau_n: loss.tau_n,
            tau_w: loss.tau_w,
            tau_e: loss.tau_e,
            mode: loss.mode,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub res: usize,
    pub tau: f64,
    /// Lattice bounds `[lo, hi]`; defaults to the grid bounds.
    pub bounds: Option<[[f64; 3]; 2]>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            res: 128,
            tau: crate::extract::DEFAULT_TAU,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub samples: usize,
    pub seed: u64,
    /// Ground-truth mesh; synthetic runs default to the analytic shape.
    pub reference: Option<PathBuf>,
    pub dataset: String,
    pub method: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            samples: crate::metrics::DEFAULT_SAMPLES,
            seed: 0,
            reference: None,
            dataset: "synthetic".into(),
            method: "curvsdf".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Additive Gaussian depth noise (meters).
    pub depth_sigma: f64,
    /// Rotation perturbation of input poses (degrees, per frame).
    pub pose_rotation_sigma_deg: f64,
    /// Translation perturbation of input poses (meters, per axis).
    pub pose_translation_sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn is_active(&self) -> bool {
        self.depth_sigma > 0.0 || self.pose_rotation_sigma_deg > 0.0 || self.pose_translation_sigma > 0.0
    }
}

impl PipelineConfig {
    /// Sparse/dense setups: 64³ at 8 mm and 256³ at 2 mm, truncation 5 voxels.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        match name {
            "sparse64" => {
                cfg.grid.dims = [64; 3];
                cfg.grid.voxel_size = 0.008;
            }
            "dense256" => {
                cfg.grid.dims = [256; 3];
                cfg.grid.voxel_size = 0.002;
                cfg.source = SourceConfig::Synthetic(SyntheticSource {
                    width: 320,
                    height: 240,
                    ..SyntheticSource::default()
                });
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset '{other}' (expected one of {})", PRESETS.join(", ")),
                ))
            }
        }
        cfg.grid.truncation = 5;
        Ok(cfg)
    }

    /// Resolves a configuration from an optional preset, file and overrides.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match preset {
            Some(p) => PipelineConfig::preset(p)?,
            None => PipelineConfig::default(),
        };
        let mut value = serde_json::to_value(&base).map_err(|e| Error::config("defaults", e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            let file_value: Value =
                serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks on every numeric field; existence of referenced paths.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.dims.iter().any(|&d| !(2..=1024).contains(&d)) {
            return Err(Error::config("grid.dims", "each dimension must be in [2, 1024]"));
        }
        positive("grid.voxel_size", g.voxel_size)?;
        if g.truncation == 0 {
            return Err(Error::config("grid.truncation", "must be at least 1"));
        }
        positive("grid.max_depth_jump", g.max_depth_jump)?;
        if !(0.0..1.0).contains(&g.min_incidence_cos) {
            return Err(Error::config("grid.min_incidence_cos", "must be in [0, 1)"));
        }
        if !g.center.iter().all(|c| c.is_finite()) {
            return Err(Error::config("grid.center", "must be finite"));
        }
        match &self.source {
            SourceConfig::Synthetic(s) => {
                if s.views == 0 {
                    return Err(Error::config("source.synthetic.views", "must be at least 1"));
                }
                positive("source.synthetic.distance", s.distance)?;
                if s.width < 3 || s.height < 3 {
                    return Err(Error::config("source.synthetic.width", "image must be at least 3x3"));
                }
                if !(s.fov_deg > 0.0 && s.fov_deg < 180.0) {
                    return Err(Error::config("source.synthetic.fov_deg", "must be in (0, 180)"));
                }
            }
            SourceConfig::Dataset(d) => {
                if !d.depth_dir.is_dir() {
                    return Err(Error::config(
                        "source.dataset.depth_dir",
                        format!("{} is not a directory", d.depth_dir.display()),
                    ));
                }
                if !d.intrinsics.is_file() {
                    return Err(Error::config(
                        "source.dataset.intrinsics",
                        format!("{} does not exist", d.intrinsics.display()),
                    ));
                }
                match &d.trajectory {
                    Some(t) if !t.is_file() => {
                        return Err(Error::config("source.dataset.trajectory", format!("{} does not exist", t.display())))
                    }
                    None if !self.tracking.enabled => {
                        return Err(Error::config("source.dataset.trajectory", "required unless tracking.enabled is set"))
                    }
                    _ => {}
                }
                if let Some(s) = d.depth_scale {
                    positive("source.dataset.depth_scale", s)?;
                }
                if d.stride == Some(0) {
                    return Err(Error::config("source.dataset.stride", "must be at least 1"));
                }
            }
        }
        let s = &self.sampler;
        self.sampler.sampler_config().validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("sampler.{field}"),
                message,
            },
            e => e,
        })?;
        let t = &self.training;
        if t.layers < 2 {
            return Err(Error::config("training.layers", "must be at least 2"));
        }
        if t.width == 0 {
            return Err(Error::config("training.width", "must be at least 1"));
        }
        positive("training.lr", t.lr)?;
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::config("training.lr_decay", "must be in (0, 1]"));
        }
        positive("training.uncertainty_lr_scale", t.uncertainty_lr_scale)?;
        for (name, v) in [("training.tau_n", t.tau_n), ("training.tau_w", t.tau_w), ("training.tau_e", t.tau_e)] {
            non_negative(name, v)?;
        }
        let per_epoch = 3 * s.m.unwrap_or(t.batch / 4) + s.m_unobs.unwrap_or(t.batch / 4);
        if t.epochs > 0 && per_epoch == 0 {
            return Err(Error::config("training.batch", "no samples per epoch"));
        }
        let e = &self.extraction;
        if !(2..=1024).contains(&e.res) {
            return Err(Error::config("extraction.res", "must be in [2, 1024]"));
        }
        if !(0.0..1.0).contains(&e.tau) {
            return Err(Error::config("extraction.tau", "must be in [0, 1)"));
        }
        if let Some([lo, hi]) = e.bounds {
            if (0..3).any(|k| !(lo[k].is_finite() && hi[k].is_finite() && hi[k] > lo[k])) {
                return Err(Error::config("extraction.bounds", "need finite lo < hi on every axis"));
            }
        }
        if self.evaluation.samples == 0 {
            return Err(Error::config("evaluation.samples", "must be at least 1"));
        }
        if let Some(r) = &self.evaluation.reference {
            if !r.is_file() {
                return Err(Error::config("evaluation.reference", format!("{} does not exist", r.display())));
            }
        }
        let n = &self.noise;
        non_negative("noise.depth_sigma", n.depth_sigma)?;
        non_negative("noise.pose_rotation_sigma_deg", n.pose_rotation_sigma_deg)?;
        non_negative("noise.pose_translation_sigma", n.pose_translation_sigma)?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            m: self.sampler.m,
            m_unobs: self.sampler.m_unobs,
            lr: t.lr,
            lr_decay: t.lr_decay,
            uncertainty_lr_scale: t.uncertainty_lr_scale,
            decay_every: t.decay_every,
            loss: LossWeights {
                tau_n: t.tau_n,
                tau_w: t.tau_w,
                tau_e: t.tau_e,
                mode: t.mode,
            },
            seed: t.seed,
            sampler: self.sampler.sampler_config(),
        }
    }

    pub fn stencil(&self) -> StencilParams {
        StencilParams {
            max_depth_jump: self.grid.max_depth_jump,
            min_incidence_cos: self.grid.min_incidence_cos,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be non-negative, got {v}")))
    }
}

/// Keys whose values are replaced wholesale, because merging two variants of
/// a tagged enum would mix their fields.
const REPLACE_KEYS: [&str; 3] = ["source", "shape", "shapes"];

/// Recursive object merge; `patch` wins.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if !REPLACE_KEYS.contains(&k.as_str()) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string, so `training.epochs=10` and `output_dir=runs/a` both work.
pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::config(assignment, "empty key"));
    }
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(o) => o,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(Error::config(path, format!("'{}' is not a section", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one component")
}

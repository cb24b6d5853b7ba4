//! Training-sample generation: first-order Taylor interpolation inside the
//! containing voxel, and curvature-stratified batches.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Voxel, VoxelGrid, VoxelSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Low,
    Median,
    High,
    Unobserved,
}

impl Stratum {
    pub const CURVATURE: [Stratum; 3] = [Stratum::Low, Stratum::Median, Stratum::High];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stratum::Low => "low",
            Stratum::Median => "median",
            Stratum::High => "high",
            Stratum::Unobserved => "unobserved",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub position: Vector3<f64>,
    /// Interpolated target distance (0 when the voxel is unobserved).
    pub psi: f64,
    /// Target uncertainty in [0, 1].
    pub weight: f64,
    /// Unit gradient of the containing voxel, zero when `weight == 0`.
    pub gradient: Vector3<f64>,
    pub mean_curvature: f64,
    pub stratum: Stratum,
    /// Surface point `v - ĝ ψᵛ` of the containing voxel when it is observed.
    pub surface_point: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolationParams {
    /// Accumulated voxel weight at which confidence saturates to 1.
    pub weight_saturation: f64,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        InterpolationParams { weight_saturation: 5.0 }
    }
}

/// Interpolates a training sample at `p` from the single voxel containing it.
///
/// `ψᵖ = ψᵛ + ⟨ĝᵛ, p − v⟩`, `wᵖ = clamp((v_s − |ψᵖ|)/v_s, 0, 1) · conf(wᵛ)` with
/// `conf(w) = min(w, w_sat)/w_sat`.
pub fn interpolate_sample<S: VoxelSource + ?Sized>(
    grid: &S,
    p: &Vector3<f64>,
    params: &InterpolationParams,
) -> Result<TrainingSample> {
    let idx = grid.locate(p).ok_or(Error::OutOfBounds(p.x, p.y, p.z))?;
    let vox = grid.voxel(idx);
    let g = vox.unit_gradient();
    let unobserved = TrainingSample {
        position: *p,
        psi: 0.0,
        weight: 0.0,
        gradient: Vector3::zeros(),
        mean_curvature: 0.0,
        stratum: Stratum::Unobserved,
        surface_point: None,
    };
    if !vox.is_observed() || g == Vector3::zeros() {
        return Ok(unobserved);
    }
    let v = grid.voxel_center(idx);
    let vs = grid.voxel_size();
    let psi = vox.psi + g.dot(&(p - v));
    let conf = vox.weight.min(params.weight_saturation) / params.weight_saturation;
    let weight = ((vs - psi.abs()) / vs).clamp(0.0, 1.0) * conf;
    let surface_point = Some(v - g * vox.psi);
    if weight > 0.0 {
        Ok(TrainingSample {
            position: *p,
            psi,
            weight,
            gradient: g,
            mean_curvature: vox.mean_curvature,
            // classified by the caller against thresholds
            stratum: Stratum::Median,
            surface_point,
        })
    } else {
        Ok(TrainingSample {
            psi,
            mean_curvature: vox.mean_curvature,
            surface_point,
            ..unobserved
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureThresholds {
    pub low: f64,
    pub high: f64,
}

impl CurvatureThresholds {
    /// Half-open classes: `H < low`, `low ≤ H < high`, `H ≥ high`.
    pub fn classify(&self, h: f64) -> Stratum {
        if h < self.low {
            Stratum::Low
        } else if h < self.high {
            Stratum::Median
        } else {
            Stratum::High
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    /// Fractions of the range `[min H, max H]`.
    #[default]
    Range,
    /// Rank percentiles of the observed values.
    Rank,
}

/// Curvature cutoffs over observed voxels.
/// Distance (in voxels) from a voxel's zero crossing within which it can still
/// produce samples with positive uncertainty: one voxel of |ψᵖ| plus half the
/// voxel diagonal of Taylor offset.
pub const SAMPLING_REACH: f64 = 1.0 + 0.866_025_403_784_438_6;

/// Fraction of values dropped at each end before taking the range, so a few
/// corrupted voxels cannot stretch it.
pub const RANGE_TRIM: f64 = 0.005;

/// Curvature cutoffs over the observed voxels that can produce training
/// samples (all observed voxels if none is that close to the surface).
pub fn curvature_thresholds(grid: &VoxelGrid, q_lo: f64, q_hi: f64, method: ThresholdMethod) -> Result<CurvatureThresholds> {
    let reach = SAMPLING_REACH * grid.voxel_size();
    let observed = || (0..grid.len()).map(|i| grid.voxel_at(i)).filter(Voxel::is_observed);
    let mut values: Vec<f64> = observed().filter(|v| v.psi.abs() < reach).map(|v| v.mean_curvature).collect();
    if values.is_empty() {
        values = observed().map(|v| v.mean_curvature).collect();
    }
    thresholds_from_values(values, q_lo, q_hi, method)
}

/// Cutoffs at `q_lo`, `q_hi` of the value range (`Range`, endpoints trimmed
/// by [`RANGE_TRIM`]) or of the sorted values (`Rank`).
pub fn thresholds_from_values(mut values: Vec<f64>, q_lo: f64, q_hi: f64, method: ThresholdMethod) -> Result<CurvatureThresholds> {
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_lo > q_hi {
        return Err(Error::invalid(format!("bad quantiles {q_lo}, {q_hi}")));
    }
    if values.is_empty() {
        return Err(Error::NoObservedVoxels);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Ok(match method {
        ThresholdMethod::Range => {
            let k = (RANGE_TRIM * n as f64).floor() as usize;
            let (lo, hi) = (values[k], values[n - 1 - k]);
            CurvatureThresholds {
                low: lo + q_lo * (hi - lo),
                high: lo + q_hi * (hi - lo),
            }
        }
        ThresholdMethod::Rank => {
            let at = |q: f64| {
                let pos = q * (n - 1) as f64;
                let (i, f) = (pos.floor() as usize, pos.fract());
                let j = (i + 1).min(n - 1);
                values[i] + f * (values[j] - values[i])
            };
            CurvatureThresholds { low: at(q_lo), high: at(q_hi) }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Exactly `m` samples from each curvature class.
    #[default]
    Stratified,
    /// `3m` observed samples regardless of curvature.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub q_lo: f64,
    pub q_hi: f64,
    pub threshold_method: ThresholdMethod,
    pub weight_saturation: f64,
    pub mode: SamplingMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            q_lo: 0.3,
            q_hi: 0.7,
            threshold_method: ThresholdMethod::Range,
            weight_saturation: 5.0,
            mode: SamplingMode::Stratified,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q_lo) {
            return Err(Error::config("q_lo", "must be in [0, 1]"));
        }
        if !(self.q_lo..=1.0).contains(&self.q_hi) {
            return Err(Error::config("q_hi", "must be in [q_lo, 1]"));
        }
        if !(self.weight_saturation.is_finite() && self.weight_saturation > 0.0) {
            return Err(Error::config("weight_saturation", "must be positive"));
        }
        Ok(())
    }

    pub fn interpolation(&self) -> InterpolationParams {
        InterpolationParams {
            weight_saturation: self.weight_saturation,
        }
    }
}

/// Precomputed candidate voxels for rejection sampling.
///
/// Drawing a candidate voxel uniformly and then a uniform point inside it is
/// the same distribution as uniform rejection sampling over the whole grid
/// conditioned on acceptance, because every voxel has the same volume and
/// non-candidates can never produce an accepted sample.
pub struct Sampler<'a> {
    grid: &'a VoxelGrid,
    thresholds: CurvatureThresholds,
    params: InterpolationParams,
    candidates: [Vec<usize>; 3],
}

/// Attempts allowed per requested sample before a stratum is declared unreachable.
const ATTEMPTS_PER_SAMPLE: usize = 200;
const MIN_ATTEMPTS: usize = 10_000;

impl<'a> Sampler<'a> {
    pub fn new(grid: &'a VoxelGrid, thresholds: CurvatureThresholds, params: InterpolationParams) -> Self {
        let reach = grid.voxel_size() * SAMPLING_REACH;
        let mut candidates: [Vec<usize>; 3] = Default::default();
        for i in 0..grid.len() {
            let v = grid.voxel_at(i);
            if v.is_observed() && v.psi.abs() < reach {
                let s = thresholds.classify(v.mean_curvature);
                candidates[s as usize].push(i);
            }
        }
        Sampler {
            grid,
            thresholds,
            params,
            candidates,
        }
    }

    pub fn thresholds(&self) -> CurvatureThresholds {
        self.thresholds
    }

    fn point_in_voxel(&self, rng: &mut ChaCha8Rng, linear: usize) -> Vector3<f64> {
        let c = self.grid.voxel_center(self.grid.index_of(linear));
        let h = 0.5 * self.grid.voxel_size();
        c + Vector3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h))
    }

    fn draw_observed(&self, rng: &mut ChaCha8Rng, pool: &[usize], stratum: Option<Stratum>, count: usize, out: &mut Vec<TrainingSample>) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let budget = (count * ATTEMPTS_PER_SAMPLE).max(MIN_ATTEMPTS);
        let report = stratum.unwrap_or(Stratum::Median);
        if pool.is_empty() {
            return Err(Error::StratumUnreachable { stratum: report, attempts: 0 });
        }
        let mut got = 0;
        for _ in 0..budget {
            let vi = pool[rng.random_range(0..pool.len())];
            let p = self.point_in_voxel(rng, vi);
            let Ok(mut s) = interpolate_sample(self.grid, &p, &self.params) else {
                continue;
            };
            if s.weight <= 0.0 {
                continue;
            }
            s.stratum = self.thresholds.classify(s.mean_curvature);
            if stratum.is_some_and(|want| want != s.stratum) {
                continue;
            }
            out.push(s);
            got += 1;
            if got == count {
                return Ok(());
            }
        }
        Err(Error::StratumUnreachable {
            stratum: report,
            attempts: budget,
        })
    }

    fn draw_unobserved(&self, rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<TrainingSample>) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let (lo, hi) = self.grid.bounds();
        let budget = (count * ATTEMPTS_PER_SAMPLE).max(MIN_ATTEMPTS);
        let mut got = 0;
        for _ in 0..budget {
            let p = Vector3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let Ok(s) = interpolate_sample(self.grid, &p, &self.params) else {
                continue;
            };
            if s.weight == 0.0 {
                out.push(s);
                got += 1;
                if got == count {
                    return Ok(());
                }
            }
        }
        Err(Error::StratumUnreachable {
            stratum: Stratum::Unobserved,
            attempts: budget,
        })
    }

    /// `m` samples per curvature class (or `3m` unclassified in uniform
    /// mode) followed by `m_unobs` samples with zero target uncertainty.
    /// Deterministic for a given seed.
    pub fn batch(&self, m: usize, m_unobs: usize, mode: SamplingMode, seed: u64) -> Result<Vec<TrainingSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(3 * m + m_unobs);
        match mode {
            SamplingMode::Stratified => {
                for s in Stratum::CURVATURE {
                    self.draw_observed(&mut rng, &self.candidates[s as usize], Some(s), m, &mut out)?;
                }
            }
            SamplingMode::Uniform => {
                let pool: Vec<usize> = self.candidates.iter().flatten().copied().collect();
                self.draw_observed(&mut rng, &pool, None, 3 * m, &mut out)?;
            }
        }
        self.draw_unobserved(&mut rng, m_unobs, &mut out)?;
        Ok(out)
    }
}

/// One-shot stratified batch.
pub fn stratified_batch(
    grid: &VoxelGrid,
    m: usize,
    thresholds: CurvatureThresholds,
    m_unobs: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    Sampler::new(grid, thresholds, InterpolationParams::default()).batch(m, m_unobs, SamplingMode::Stratified, seed)
}

/// CSV dump: `px,py,pz,psi,w,gx,gy,gz,H,stratum`.
pub fn write_batch_csv(samples: &[TrainingSample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "px,py,pz,psi,w,gx,gy,gz,H,stratum")?;
    for s in samples {
        let (p, g) = (s.position, s.gradient);
        writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            p.x,
            p.y,
            p.z,
            s.psi,
            s.weight,
            g.x,
            g.y,
            g.z,
            s.mean_curvature,
            s.stratum.as_str()
        )?;
    }
    Ok(())
}

//! Frame-to-model camera tracking: Gauss-Newton on SE(3) minimising the
//! weighted squared signed distance of the frame's points in the fused grid.

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::ingest::DepthFrame;

pub const MIN_CORRESPONDENCES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingParams {
    pub max_iters: usize,
    /// Stop when the twist update norm falls below this.
    pub tol: f64,
    /// Levenberg damping added once when the normal equations are singular.
    pub damping: f64,
    /// Upper bound on the number of frame points used.
    pub max_points: usize,
    /// Weight saturation used to turn accumulated voxel weight into [0, 1].
    pub weight_saturation: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        TrackingParams {
            max_iters: 20,
            tol: 1e-6,
            damping: 1e-4,
            max_points: 20_000,
            weight_saturation: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Mean weighted squared residual at `pose`.
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the last twist update.
    pub last_update_norm: f64,
}

/// Trilinearly interpolated signed distance plus the gradient stored in the
/// containing voxel. `None` if any of the 8 neighbours is unobserved or the
/// value lies outside the truncation band.
pub fn sample_distance(grid: &VoxelGrid, p: &Vector3<f64>, weight_saturation: f64) -> Option<(f64, Vector3<f64>, f64)> {
    let vs = grid.voxel_size();
    let [nx, ny, nz] = grid.dims();
    let origin = grid.voxel_center([0, 0, 0]);
    let q = (p - origin) / vs;
    let base = q.map(f64::floor);
    if base.x < 0.0 || base.y < 0.0 || base.z < 0.0 {
        return None;
    }
    let (i0, j0, k0) = (base.x as usize, base.y as usize, base.z as usize);
    if i0 + 1 >= nx || j0 + 1 >= ny || k0 + 1 >= nz {
        return None;
    }
    let f = q - base;
    let mut psi = 0.0;
    for c in 0..8 {
        let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let v = grid.voxel([i0 + di, j0 + dj, k0 + dk]);
        if !v.is_observed() {
            return None;
        }
        let wx = if di == 1 { f.x } else { 1.0 - f.x };
        let wy = if dj == 1 { f.y } else { 1.0 - f.y };
        let wz = if dk == 1 { f.z } else { 1.0 - f.z };
        psi += wx * wy * wz * v.psi;
    }
    if psi.abs() > grid.truncation_distance() {
        return None;
    }
    let own = grid.voxel(grid.locate(p)?);
    let g = own.unit_gradient();
    if g == Vector3::zeros() {
        return None;
    }
    let conf = own.weight.min(weight_saturation) / weight_saturation;
    Some((psi, g, conf))
}

struct Normal {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    cost: f64,
    count: usize,
}

fn accumulate(grid: &VoxelGrid, points: &[Vector3<f64>], pose: &Pose, params: &TrackingParams) -> Normal {
    let mut acc = Normal {
        h: Matrix6::zeros(),
        b: Vector6::zeros(),
        cost: 0.0,
        count: 0,
    };
    for p in points {
        let q = pose.transform_point(p);
        let Some((psi, g, w)) = sample_distance(grid, &q, params.weight_saturation) else {
            continue;
        };
        if w <= 0.0 {
            continue;
        }
        // d q / d xi = [-[q]x | I]  =>  d psi / d xi = [q × g ; g]
        let qxg = q.cross(&g);
        let j = Vector6::new(qxg.x, qxg.y, qxg.z, g.x, g.y, g.z);
        acc.h += j * j.transpose() * w;
        acc.b += j * (w * psi);
        acc.cost += w * psi * psi;
        acc.count += 1;
    }
    acc
}

fn frame_points(frame: &DepthFrame, max_points: usize) -> Vec<Vector3<f64>> {
    let valid = frame.valid_count();
    let stride = valid.div_ceil(max_points.max(1)).max(1);
    let mut pts = Vec::with_capacity(valid / stride + 1);
    let mut seen = 0usize;
    for n in 0..frame.height() {
        for m in 0..frame.width() {
            if frame.is_valid(m, n) {
                if seen.is_multiple_of(stride) {
                    pts.push(frame.camera_point(m, n));
                }
                seen += 1;
            }
        }
    }
    pts
}

fn solve(h: &Matrix6<f64>, b: &Vector6<f64>, damping: f64) -> Result<Vector6<f64>> {
    if let Some(ch) = h.cholesky() {
        let x = ch.solve(&(-b));
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let scale = h.diagonal().max().max(1.0);
    let damped = h + Matrix6::identity() * (damping * scale);
    damped.cholesky().map(|ch| ch.solve(&(-b))).ok_or(Error::SingularSystem)
}

/// Estimates the camera-to-world pose of `frame` against `grid`, starting at `init`.
pub fn estimate_pose(grid: &VoxelGrid, frame: &DepthFrame, init: &Pose, params: &TrackingParams) -> Result<PoseEstimate> {
    let points = frame_points(frame, params.max_points);
    let mut pose = *init;
    let mut current = accumulate(grid, &points, &pose, params);
    if current.count < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            found: current.count,
            required: MIN_CORRESPONDENCES,
        });
    }
    let mean = |n: &Normal| n.cost / n.count.max(1) as f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_update_norm = f64::INFINITY;
    while iterations < params.max_iters {
        iterations += 1;
        let mut step = solve(&current.h, &current.b, params.damping)?;
        // backtrack until the mean cost does not increase
        let mut accepted = None;
        for _ in 0..8 {
            let candidate = pose.left_perturb(&step);
            let next = accumulate(grid, &points, &candidate, params);
            if next.count >= MIN_CORRESPONDENCES && mean(&next) <= mean(&current) {
                accepted = Some((candidate, next));
                break;
            }
            step *= 0.5;
        }
        last_update_norm = step.norm();
        match accepted {
            Some((candidate, next)) => {
                pose = candidate;
                current = next;
            }
            None => {
                converged = last_update_norm < params.tol;
                break;
            }
        }
        if last_update_norm < params.tol {
            converged = true;
            break;
        }
    }
    Ok(PoseEstimate {
        pose,
        final_cost: mean(&current),
        iterations,
        converged,
        last_update_norm,
    })
}

//! Analytic signed-distance shapes and a synthetic depth renderer.
//!
//! All signed distances in this crate are positive inside the surface.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::error::Result;
use crate::ingest::DepthFrame;
use crate::mesh::UncertainMesh;

/// Sphere-tracing convergence threshold in meters.
pub const TRACE_EPSILON: f64 = 1e-6;
pub const TRACE_MAX_STEPS: usize = 256;
pub const TRACE_FAR: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Ring around the axis through `center` parallel to z.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// The region `normal · x >= offset`.
    HalfSpace {
        normal: [f64; 3],
        offset: f64,
    },
    Union {
        shapes: Vec<Shape>,
    },
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Shape {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Shape {
        Shape::Sphere {
            center: center.into(),
            radius,
        }
    }

    /// Signed distance, positive inside.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => radius - (p - v3(center)).norm(),
            Shape::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let q = p - v3(center);
                let ring = (q.x * q.x + q.y * q.y).sqrt() - major_radius;
                minor_radius - (ring * ring + q.z * q.z).sqrt()
            }
            Shape::Box { center, half_extents } => {
                let q = (p - v3(center)).abs() - v3(half_extents);
                let outside = q.map(|c| c.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                -(outside + inside)
            }
            Shape::HalfSpace { normal, offset } => {
                let n = v3(normal).normalize();
                n.dot(p) - offset
            }
            Shape::Union { shapes } => shapes.iter().map(|s| s.sdf(p)).fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Gradient of the signed distance (points inward), by central differences.
    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-6;
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            g[k] = (self.sdf(&(p + e)) - self.sdf(&(p - e))) / (2.0 * h);
        }
        g
    }

    /// Newton steps on `sdf(origin + t·dir) = 0`, so rendered depth is exact to
    /// rounding rather than to the tracing tolerance. Steps that leave the
    /// tolerance window are rejected.
    fn refine_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t0: f64) -> f64 {
        let mut t = t0;
        for _ in 0..4 {
            let f = self.sdf(&(origin + dir * t));
            if f == 0.0 {
                break;
            }
            let slope = self.gradient(&(origin + dir * t)).dot(dir);
            if slope.abs() < 1e-3 {
                break;
            }
            let next = t - f / slope;
            if !next.is_finite() || (next - t0).abs() > 10.0 * TRACE_EPSILON {
                break;
            }
            t = next;
        }
        t
    }

    /// Ray parameter of the first sphere-traced hit along unit `dir` from `origin`.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..TRACE_MAX_STEPS {
            let d = -self.sdf(&(origin + dir * t));
            if d < TRACE_EPSILON {
                // started inside: treat as no hit
                return if d < -TRACE_EPSILON && t == 0.0 { None } else { Some(self.refine_hit(origin, dir, t)) };
            }
            t += d;
            if t > TRACE_FAR {
                return None;
            }
        }
        None
    }
}

/// What the renderer draws.
#[derive(Debug, Clone, Copy)]
pub enum Scene<'a> {
    Analytic(&'a Shape),
    Mesh(&'a UncertainMesh),
}

struct PreparedTriangle {
    a: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

// Möller–Trumbore; returns the ray parameter of the hit.
#[inline]
fn intersect(tri: &PreparedTriangle, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let p = dir.cross(&tri.e2);
    let det = tri.e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri.a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&tri.e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = tri.e2.dot(&q) * inv;
    (t > 1e-9).then_some(t)
}

/// Renders z-depth (distance along the optical axis) of the first surface hit
/// for every pixel; misses are invalid pixels.
pub fn render_depth(scene: Scene<'_>, pose: &Pose, intrinsics: &Intrinsics) -> Result<DepthFrame> {
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let origin = pose.translation;
    let tris: Vec<PreparedTriangle> = match scene {
        Scene::Mesh(mesh) => (0..mesh.triangles.len())
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                PreparedTriangle { a, e1: b - a, e2: c - a }
            })
            .collect(),
        Scene::Analytic(_) => Vec::new(),
    };
    let mut depth = vec![0.0; w * h];
    depth.par_chunks_mut(w).enumerate().for_each(|(n, row)| {
        for (m, out) in row.iter_mut().enumerate() {
            let ray_cam = intrinsics.ray(m as f64, n as f64);
            let scale = ray_cam.norm();
            let dir = pose.rotation * (ray_cam / scale);
            let t = match scene {
                Scene::Analytic(shape) => shape.trace(&origin, &dir),
                Scene::Mesh(_) => tris
                    .iter()
                    .filter_map(|tri| intersect(tri, &origin, &dir))
                    .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t)))),
            };
            // ray_cam has unit z, so z-depth = t / |ray_cam|
            *out = t.map_or(0.0, |t| t / scale);
        }
    });
    DepthFrame::from_depths(depth, *intrinsics, *pose)
}

/// Camera poses on a circle (or the upper half of one) around `target`,
/// all looking at it. `elevation_deg` lifts the circle along +y.
pub fn orbit_poses(target: Vector3<f64>, radius: f64, count: usize, elevation_deg: f64, arc_deg: f64) -> Vec<Pose> {
    let el = elevation_deg.to_radians();
    (0..count)
        .map(|i| {
            let frac = if arc_deg >= 360.0 {
                i as f64 / count as f64
            } else if count > 1 {
                i as f64 / (count - 1) as f64
            } else {
                0.5
            };
            let az = (frac * arc_deg).to_radians();
            let eye = target + Vector3::new(az.cos() * el.cos(), el.sin(), az.sin() * el.cos()) * radius;
            Pose::look_at(eye, target, Vector3::y()).expect("orbit camera is well-posed")
        })
        .collect()
}

/// Viewpoints spread over the full sphere of directions (Fibonacci lattice).
pub fn fibonacci_poses(target: Vector3<f64>, radius: f64, count: usize) -> Vec<Pose> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            let dir = Vector3::new(th.cos() * r, y, th.sin() * r);
            let up = if dir.y.abs() > 0.99 { Vector3::x() } else { Vector3::y() };
            Pose::look_at(target + dir * radius, target, up).expect("fibonacci camera is well-posed")
        })
        .collect()
}

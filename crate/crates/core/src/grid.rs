//! Dense voxel grid storing, per voxel, a truncated signed distance, an
//! accumulated weight, a distance gradient and mean/Gaussian curvature.
//!
//! Signed distances are positive inside the surface, so the stored gradient
//! points inward and a voxel's nearest surface point is `v - ĝ ψ`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::diffgeo::FrameGeometry;
use crate::error::{Error, Result};
use crate::ingest::DepthFrame;
use crate::mesh::UncertainMesh;
use crate::render::Shape;

pub const GRID_MAGIC: &[u8; 4] = b"CSDF";
pub const GRID_VERSION: u32 = 1;

/// One voxel's fused state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Voxel {
    pub psi: f64,
    pub weight: f64,
    pub gradient: Vector3<f64>,
    pub mean_curvature: f64,
    pub gaussian_curvature: f64,
}

impl Voxel {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }

    /// Unit gradient, or zero for unobserved / degenerate voxels.
    pub fn unit_gradient(&self) -> Vector3<f64> {
        self.gradient.try_normalize(0.0).unwrap_or_else(Vector3::zeros)
    }
}

/// Read access to voxels, the only thing interpolation needs.
pub trait VoxelSource {
    fn voxel_size(&self) -> f64;
    fn truncation_distance(&self) -> f64;
    fn locate(&self, p: &Vector3<f64>) -> Option<[usize; 3]>;
    fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64>;
    fn voxel(&self, idx: [usize; 3]) -> Voxel;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    center: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    truncation: u32,
    psi: Vec<f64>,
    weight: Vec<f64>,
    gradient: Vec<Vector3<f64>>,
    mean_curvature: Vec<f64>,
    gaussian_curvature: Vec<f64>,
}

/// Which side of the surface the per-frame weight decays on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// Full weight in front of the surface (d ≤ 0), linear decay behind it.
    #[default]
    Inside,
    /// Mirror image: full weight behind, decay in front.
    Outside,
}

/// Which observed point a voxel is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    /// The closest observed point, found by a local pixel search seeded at the
    /// pixel the voxel projects to.
    #[default]
    Nearest,
    /// The pixel the voxel projects to.
    Projective,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntegrationParams {
    pub decay: WeightDecay,
    pub association: Association,
}

const TILE: usize = 16;

/// Depth range of usable pixels per `TILE`×`TILE` block, to rule out voxels
/// with no observed point within reach before searching.
struct DepthTiles {
    cols: usize,
    rows: usize,
    range: Vec<(f64, f64)>,
}

impl DepthTiles {
    fn new(frame: &DepthFrame, geom: &FrameGeometry) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let (cols, rows) = (w.div_ceil(TILE), h.div_ceil(TILE));
        let mut range = vec![(f64::INFINITY, f64::NEG_INFINITY); cols * rows];
        for n in 0..h {
            for m in 0..w {
                let i = n * w + m;
                if geom.normals.valid[i] && geom.curvatures.valid[i] {
                    let z = frame.depth(m, n);
                    let r = &mut range[(n / TILE) * cols + m / TILE];
                    r.0 = r.0.min(z);
                    r.1 = r.1.max(z);
                }
            }
        }
        DepthTiles { cols, rows, range }
    }

    /// Whether any usable pixel within `radius` pixels of `(m, n)` may have
    /// depth in `[z_lo, z_hi]`.
    fn may_contain(&self, m: usize, n: usize, radius: f64, z_lo: f64, z_hi: f64) -> bool {
        let r = radius.ceil().min(1e6) as usize;
        let (c0, c1) = (m.saturating_sub(r) / TILE, ((m + r) / TILE).min(self.cols - 1));
        let (r0, r1) = (n.saturating_sub(r) / TILE, ((n + r) / TILE).min(self.rows - 1));
        (r0..=r1).any(|row| {
            (c0..=c1).any(|col| {
                let (lo, hi) = self.range[row * self.cols + col];
                lo <= z_hi && hi >= z_lo
            })
        })
    }
}

/// Foot-point steps, then pixel strides of the final local search.
const FOOT_STEPS: usize = 4;
const SEARCH_STRIDES: [usize; 3] = [4, 2, 1];
const SEARCH_MOVES_PER_STRIDE: usize = 8;

/// Closest usable pixel point to `pc` (camera frame). Starts with a few
/// steps to the projection of the foot of `pc` on the tangent plane at the
/// current point, then greedy descent on `|x_j - v|` at decreasing strides.
/// Converged points farther than `band` from their tangent plane skip the descent.
fn nearest_pixel(frame: &DepthFrame, geom: &FrameGeometry, pc: &Vector3<f64>, start: (usize, usize), band: f64) -> (usize, usize) {
    let k = &frame.intrinsics;
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let usable = |m: i64, n: i64| {
        m >= 0 && n >= 0 && m < w && n < h && {
            let i = (n * w + m) as usize;
            geom.normals.valid[i] && geom.curvatures.valid[i]
        }
    };
    let dist2 = |m: i64, n: i64| (frame.camera_point(m as usize, n as usize) - pc).norm_squared();
    let (mut m, mut n) = (start.0 as i64, start.1 as i64);
    let mut best = dist2(m, n);
    let mut converged = false;
    for _ in 0..FOOT_STEPS {
        let x = frame.camera_point(m as usize, n as usize);
        let nrm = geom.normals.normals[(n * w + m) as usize];
        let foot = pc + nrm * (x - pc).dot(&nrm);
        let Some((a, b)) = k.project_to_pixel(&foot) else {
            break;
        };
        let (a, b) = (a as i64, b as i64);
        if (a, b) == (m, n) {
            converged = true;
            break;
        }
        if !usable(a, b) {
            break;
        }
        let d = dist2(a, b);
        if d >= best {
            break;
        }
        best = d;
        (m, n) = (a, b);
    }
    if converged {
        let i = (n * w + m) as usize;
        let d = (frame.camera_point(m as usize, n as usize) - pc).dot(&geom.normals.normals[i]);
        if d.abs() > band {
            // the polish cannot bring it into the band
            return (m as usize, n as usize);
        }
    }
    // a fixed point of the foot step only needs the final polish
    let strides = if converged { &SEARCH_STRIDES[SEARCH_STRIDES.len() - 1..] } else { &SEARCH_STRIDES[..] };
    for &stride in strides {
        let s = stride as i64;
        for _ in 0..SEARCH_MOVES_PER_STRIDE {
            let mut moved = false;
            for (dm, dn) in [(-s, 0), (s, 0), (0, -s), (0, s), (-s, -s), (s, -s), (-s, s), (s, s)] {
                let (a, b) = (m + dm, n + dn);
                if usable(a, b) {
                    let d = dist2(a, b);
                    if d < best {
                        best = d;
                        (m, n) = (a, b);
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }
    (m as usize, n as usize)
}

impl VoxelGrid {
    /// Zeroed grid. Voxel `(i, j, k)` sits at `center + (idx - dims / 2) * voxel_size`
    /// (integer division), so `center` is the center of the middle voxel.
    pub fn new(center: Vector3<f64>, dims: [usize; 3], voxel_size: f64, truncation: u32) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
        }
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dimensions must be positive, got {dims:?}")));
        }
        if truncation == 0 {
            return Err(Error::invalid("truncation must be at least one voxel"));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::invalid("grid too large"))?;
        Ok(VoxelGrid {
            center,
            voxel_size,
            dims,
            truncation,
            psi: vec![0.0; n],
            weight: vec![0.0; n],
            gradient: vec![Vector3::zeros(); n],
            mean_curvature: vec![0.0; n],
            gaussian_curvature: vec![0.0; n],
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn truncation_distance(&self) -> f64 {
        self.voxel_size * self.truncation as f64
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    fn offset(&self) -> [usize; 3] {
        [self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2]
    }

    #[inline]
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn index_of(&self, linear: usize) -> [usize; 3] {
        let i = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        let o = self.offset();
        self.center
            + Vector3::new(
                idx[0] as f64 - o[0] as f64,
                idx[1] as f64 - o[1] as f64,
                idx[2] as f64 - o[2] as f64,
            ) * self.voxel_size
    }

    /// Axis-aligned box covered by the voxel cells.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = self.voxel_center([0, 0, 0]) - Vector3::repeat(0.5 * self.voxel_size);
        let hi = self.voxel_center([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1])
            + Vector3::repeat(0.5 * self.voxel_size);
        (lo, hi)
    }

    /// One-step lookup `round((p - c) / v_s)` shifted to array indices.
    #[inline]
    pub fn locate(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let o = self.offset();
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let r = ((p[k] - self.center[k]) / self.voxel_size).round() + o[k] as f64;
            if !(r >= 0.0 && r < self.dims[k] as f64) {
                return None;
            }
            idx[k] = r as usize;
        }
        Some(idx)
    }

    #[inline]
    pub fn voxel(&self, idx: [usize; 3]) -> Voxel {
        self.voxel_at(self.linear_index(idx))
    }

    #[inline]
    pub fn voxel_at(&self, i: usize) -> Voxel {
        Voxel {
            psi: self.psi[i],
            weight: self.weight[i],
            gradient: self.gradient[i],
            mean_curvature: self.mean_curvature[i],
            gaussian_curvature: self.gaussian_curvature[i],
        }
    }

    pub fn set_voxel(&mut self, idx: [usize; 3], v: Voxel) {
        let i = self.linear_index(idx);
        self.psi[i] = v.psi;
        self.weight[i] = v.weight;
        self.gradient[i] = v.gradient;
        self.mean_curvature[i] = v.mean_curvature;
        self.gaussian_curvature[i] = v.gaussian_curvature;
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn mean_curvatures(&self) -> &[f64] {
        &self.mean_curvature
    }

    /// Fuses one depth frame with its normals and curvatures.
    ///
    /// Each voxel center is projected into the frame. The pixel it lands on,
    /// or with [`Association::Nearest`] the closest observed point near it
    /// (voxels with no observed point within `v_s T` are skipped), supplies
    /// the surface point `x`, outward normal `n` and curvatures. The
    /// point-to-plane distance `d = (x - v)·n` is positive behind the surface.
    /// Voxels with `d < -v_s T` are free space and left untouched; the
    /// per-frame weight is 1 on the full-weight side and decays linearly to 0
    /// at `v_s T` on the other.
    pub fn integrate(&mut self, frame: &DepthFrame, geom: &FrameGeometry, params: &IntegrationParams) {
        let trunc = self.truncation_distance();
        let pose = frame.pose;
        let k = frame.intrinsics;
        let [nx, ny, _] = self.dims;
        let slab = nx * ny;
        let center = self.center;
        let vs = self.voxel_size;
        let offset = self.offset();
        let tiles = (params.association == Association::Nearest).then(|| DepthTiles::new(frame, geom));

        let psi = self.psi.par_chunks_mut(slab);
        let weight = self.weight.par_chunks_mut(slab);
        let grad = self.gradient.par_chunks_mut(slab);
        let hm = self.mean_curvature.par_chunks_mut(slab);
        let kg = self.gaussian_curvature.par_chunks_mut(slab);
        psi.zip(weight)
            .zip(grad)
            .zip(hm.zip(kg))
            .enumerate()
            .for_each(|(z, (((psi, weight), grad), (hm, kg)))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let v = center
                            + Vector3::new(
                                i as f64 - offset[0] as f64,
                                j as f64 - offset[1] as f64,
                                z as f64 - offset[2] as f64,
                            ) * vs;
                        let pc = pose.inverse_transform_point(&v);
                        let Some((m, n)) = k.project_to_pixel(&pc) else {
                            continue;
                        };
                        if !(geom.normals.valid[n * k.width + m] && geom.curvatures.valid[n * k.width + m]) {
                            continue;
                        }
                        let (m, n) = match params.association {
                            Association::Nearest => {
                                // every point within `trunc` projects within this many pixels
                                let reach = if pc.z > trunc { k.fx.max(k.fy) * trunc / (pc.z - trunc) } else { f64::INFINITY };
                                if !tiles.as_ref().is_some_and(|t| t.may_contain(m, n, reach, pc.z - trunc, pc.z + trunc)) {
                                    continue;
                                }
                                let (m, n) = nearest_pixel(frame, geom, &pc, (m, n), trunc + vs);
                                if (frame.camera_point(m, n) - pc).norm() > trunc {
                                    continue;
                                }
                                (m, n)
                            }
                            Association::Projective => (m, n),
                        };
                        let (Some(normal_cam), Some((h, kk))) = (geom.normals.at(m, n), geom.curvatures.at(m, n)) else {
                            continue;
                        };
                        let x = frame.camera_point(m, n);
                        // in the camera frame: d = (x - v)·n_out
                        let d = (x - pc).dot(&normal_cam);
                        let w = match params.decay {
                            WeightDecay::Inside => {
                                if d < -trunc {
                                    continue;
                                }
                                if d <= 0.0 {
                                    1.0
                                } else if d <= trunc {
                                    1.0 - d / trunc
                                } else {
                                    0.0
                                }
                            }
                            WeightDecay::Outside => {
                                if d > trunc {
                                    continue;
                                }
                                if d >= 0.0 {
                                    1.0
                                } else if d >= -trunc {
                                    1.0 + d / trunc
                                } else {
                                    0.0
                                }
                            }
                        };
                        if w <= 0.0 {
                            continue;
                        }
                        let li = i + nx * j;
                        let w_old = weight[li];
                        let w_new = w_old + w;
                        // inward gradient in the world frame
                        let g = -(pose.rotation * normal_cam);
                        psi[li] = (w_old * psi[li] + w * d) / w_new;
                        grad[li] = (grad[li] * w_old + g * w) / w_new;
                        hm[li] = (w_old * hm[li] + w * h) / w_new;
                        kg[li] = (w_old * kg[li] + w * kk) / w_new;
                        weight[li] = w_new;
                        if grad[li].norm_squared() == 0.0 {
                            // opposing normals cancelled out
                            weight[li] = 0.0;
                            psi[li] = 0.0;
                            hm[li] = 0.0;
                            kg[li] = 0.0;
                        }
                    }
                }
            });
    }

    /// Surface points `x = v - ĝ ψ` of voxels with `w ≥ w_min` inside the band.
    pub fn extract_points(&self, w_min: f64) -> SurfacePointSet {
        let trunc = self.truncation_distance();
        let mut out = SurfacePointSet::default();
        for i in 0..self.len() {
            let v = self.voxel_at(i);
            if v.weight < w_min || v.weight <= 0.0 || v.psi.abs() >= trunc {
                continue;
            }
            let g = v.unit_gradient();
            if g == Vector3::zeros() {
                continue;
            }
            let c = self.voxel_center(self.index_of(i));
            out.positions.push(c - g * v.psi);
            out.normals.push(g);
            out.mean_curvature.push(v.mean_curvature);
            out.gaussian_curvature.push(v.gaussian_curvature);
            out.weights.push(v.weight);
            out.voxels.push(i);
        }
        out
    }

    /// Fills every voxel within `band` of the surface from an analytic shape
    /// (weight 1, exact distance and gradient, zero curvature). Test fixture
    /// and "clean grid" construction.
    pub fn fill_from_shape(&mut self, shape: &Shape, band: f64) {
        for i in 0..self.len() {
            let c = self.voxel_center(self.index_of(i));
            let d = shape.sdf(&c);
            if d.abs() <= band {
                let g = shape.gradient(&c);
                if g.norm_squared() > 0.0 {
                    self.psi[i] = d;
                    self.gradient[i] = g;
                    self.weight[i] = 1.0;
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Little-endian: magic, version, center (3×f64), voxel size (f64),
    /// dims (3×u32), truncation (u32), then per voxel ψ, w, g (3), H, K as f64.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(GRID_MAGIC)?;
        out.write_all(&GRID_VERSION.to_le_bytes())?;
        for c in self.center.iter() {
            out.write_all(&c.to_le_bytes())?;
        }
        out.write_all(&self.voxel_size.to_le_bytes())?;
        for d in self.dims {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(&self.truncation.to_le_bytes())?;
        let mut rec = [0u8; 56];
        for i in 0..self.len() {
            let g = self.gradient[i];
            let vals = [
                self.psi[i],
                self.weight[i],
                g.x,
                g.y,
                g.z,
                self.mean_curvature[i],
                self.gaussian_curvature[i],
            ];
            for (k, v) in vals.iter().enumerate() {
                rec[k * 8..k * 8 + 8].copy_from_slice(&v.to_le_bytes());
            }
            out.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let truncated = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format("grid file truncated")
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != GRID_MAGIC {
            return Err(Error::format(format!("bad grid magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b4).map_err(truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != GRID_VERSION {
            return Err(Error::format(format!("unsupported grid version {version}")));
        }
        let mut f64s = |n: usize, input: &mut dyn Read| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    input.read_exact(&mut b8).map_err(truncated)?;
                    Ok(f64::from_le_bytes(b8))
                })
                .collect()
        };
        let c = f64s(3, input)?;
        let vs = f64s(1, input)?[0];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            input.read_exact(&mut b4).map_err(truncated)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        input.read_exact(&mut b4).map_err(truncated)?;
        let trunc = u32::from_le_bytes(b4);
        let mut grid = VoxelGrid::new(Vector3::new(c[0], c[1], c[2]), dims, vs, trunc)
            .map_err(|e| Error::format(format!("bad grid header: {e}")))?;
        let mut rec = [0u8; 56];
        for i in 0..grid.len() {
            input.read_exact(&mut rec).map_err(truncated)?;
            let v = |k: usize| f64::from_le_bytes(rec[k * 8..k * 8 + 8].try_into().unwrap());
            grid.psi[i] = v(0);
            grid.weight[i] = v(1);
            grid.gradient[i] = Vector3::new(v(2), v(3), v(4));
            grid.mean_curvature[i] = v(5);
            grid.gaussian_curvature[i] = v(6);
        }
        Ok(grid)
    }
}

impl VoxelSource for VoxelGrid {
    fn voxel_size(&self) -> f64 {
        self.voxel_size
    }
    fn truncation_distance(&self) -> f64 {
        VoxelGrid::truncation_distance(self)
    }
    fn locate(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        VoxelGrid::locate(self, p)
    }
    fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        VoxelGrid::voxel_center(self, idx)
    }
    fn voxel(&self, idx: [usize; 3]) -> Voxel {
        VoxelGrid::voxel(self, idx)
    }
}

/// Oriented surface samples recovered from the grid.
#[derive(Debug, Clone, Default)]
pub struct SurfacePointSet {
    pub positions: Vec<Vector3<f64>>,
    /// Unit inward gradients.
    pub normals: Vec<Vector3<f64>>,
    pub mean_curvature: Vec<f64>,
    pub gaussian_curvature: Vec<f64>,
    pub weights: Vec<f64>,
    /// Linear index of the source voxel.
    pub voxels: Vec<usize>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// ASCII PLY with outward normals and the voxel weight as quality.
    pub fn write_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(
            out,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty float ny\nproperty float nz\nproperty float quality\n\
             property float mean_curvature\nend_header\n",
            self.len()
        )?;
        for i in 0..self.len() {
            let (p, n) = (self.positions[i], -self.normals[i]);
            writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                p.x as f32, p.y as f32, p.z as f32, n.x as f32, n.y as f32, n.z as f32, self.weights[i] as f32,
                self.mean_curvature[i] as f32
            )?;
        }
        Ok(())
    }

    pub fn as_mesh_vertices(&self) -> UncertainMesh {
        UncertainMesh {
            vertices: self.positions.clone(),
            uncertainty: self.weights.clone(),
            triangles: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_examples() {
        let g = VoxelGrid::new(Vector3::zeros(), [64, 64, 64], 0.008, 5).unwrap();
        assert_eq!(g.len(), 262_144);
        assert_eq!(g.observed_count(), 0);
        assert!(g.psi.iter().chain(&g.mean_curvature).chain(&g.gaussian_curvature).all(|v| *v == 0.0));

        let c = Vector3::new(0.1, -0.2, 0.3);
        let g = VoxelGrid::new(c, [1, 1, 1], 0.5, 1).unwrap();
        assert_eq!(g.voxel_center([0, 0, 0]), c);
        assert_eq!(g.locate(&c), Some([0, 0, 0]));

        assert!(VoxelGrid::new(Vector3::zeros(), [4, 4, 4], 0.0, 5).is_err());
        assert!(VoxelGrid::new(Vector3::zeros(), [4, 0, 4], 0.1, 5).is_err());
    }

    #[test]
    fn locate_examples() {
        let g = VoxelGrid::new(Vector3::zeros(), [9, 9, 9], 1.0, 5).unwrap();
        assert_eq!(g.locate(&Vector3::new(0.4, 1.6, -0.2)), Some([4, 6, 4]));
        assert_eq!(g.locate(&Vector3::zeros()), Some([4, 4, 4]));
        assert_eq!(g.locate(&Vector3::new(4.6, 0.0, 0.0)), None);
        assert_eq!(g.locate(&Vector3::new(0.0, -4.6, 0.0)), None);
        assert_eq!(g.voxel_center([4, 6, 4]), Vector3::new(0.0, 2.0, 0.0));
    }

    #[test]
    fn extraction_examples() {
        let vs = 0.1;
        let mut g = VoxelGrid::new(Vector3::zeros(), [5, 5, 5], vs, 5).unwrap();
        let base = Voxel {
            psi: 0.0,
            weight: 1.0,
            gradient: Vector3::x(),
            ..Default::default()
        };
        g.set_voxel([1, 1, 1], base);
        g.set_voxel([3, 3, 3], Voxel { psi: 0.5 * vs, ..base });
        let pts = g.extract_points(0.5);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts.positions[0], g.voxel_center([1, 1, 1]));
        let expect = g.voxel_center([3, 3, 3]) - Vector3::new(0.5 * vs, 0.0, 0.0);
        assert!((pts.positions[1] - expect).norm() < 1e-15);
    }

    #[test]
    fn save_load_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = VoxelGrid::new(Vector3::new(0.5, 0.25, -1.0), [3, 4, 5], 0.02, 4).unwrap();
        g.fill_from_shape(&Shape::sphere(Vector3::new(0.5, 0.25, -1.0), 0.03), 0.05);
        g.mean_curvature[7] = 1.0 / 3.0;
        let p = dir.path().join("g.csdf");
        g.save(&p).unwrap();
        assert_eq!(VoxelGrid::load(&p).unwrap(), g);

        let empty = VoxelGrid::new(Vector3::zeros(), [1, 1, 1], 1.0, 1).unwrap();
        empty.save(&p).unwrap();
        assert_eq!(VoxelGrid::load(&p).unwrap(), empty);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(VoxelGrid::load(&p), Err(Error::Format(_))));

        g.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(VoxelGrid::load(&p), Err(Error::Format(m)) if m.contains("truncated")));
    }
}

//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::cell::Cell;

use curvsdf::diffgeo::{frame_geometry, StencilParams};
use curvsdf::extract::{ScalarField, CORNERS, EDGES};
use curvsdf::mc_tables::TRI_TABLE;
use curvsdf::nalgebra::Vector3;
use curvsdf::render::{fibonacci_poses, render_depth, Scene};
use curvsdf::{DepthFrame, Intrinsics, IntegrationParams, Pose, Shape, Voxel, VoxelGrid, VoxelSource};

pub fn render_views(shape: &Shape, poses: &[Pose], k: &Intrinsics) -> Vec<DepthFrame> {
    poses
        .iter()
        .map(|p| render_depth(Scene::Analytic(shape), p, k).unwrap())
        .collect()
}

pub fn fuse(grid: &mut VoxelGrid, frames: &[DepthFrame], stencil: &StencilParams) {
    for f in frames {
        let g = frame_geometry(f, stencil);
        grid.integrate(f, &g, &IntegrationParams::default());
    }
}

/// r = 0.2 sphere at the origin fused from `views` directions into a 64³ grid at 8 mm.
pub fn fused_sphere(views: usize) -> (Shape, VoxelGrid) {
    let shape = Shape::sphere(Vector3::zeros(), 0.2);
    let k = Intrinsics::from_fov(160, 120, 60.0).unwrap();
    let frames = render_views(&shape, &fibonacci_poses(Vector3::zeros(), 0.7, views), &k);
    let mut grid = VoxelGrid::new(Vector3::zeros(), [64; 3], 0.008, 5).unwrap();
    fuse(&mut grid, &frames, &StencilParams::default());
    (shape, grid)
}

/// Sphere, box and floor with no rotational symmetry, and a 96³ grid at 6 mm
/// filled with its exact distance.
pub fn tracking_scene() -> (Shape, VoxelGrid) {
    let scene = Shape::Union {
        shapes: vec![
            Shape::sphere(Vector3::new(-0.1, 0.0, 0.05), 0.12),
            Shape::Box {
                center: [0.12, -0.02, -0.05],
                half_extents: [0.08, 0.1, 0.06],
            },
            Shape::HalfSpace {
                normal: [0.0, -1.0, 0.0],
                offset: 0.12,
            },
        ],
    };
    let mut grid = VoxelGrid::new(Vector3::zeros(), [96; 3], 0.006, 5).unwrap();
    grid.fill_from_shape(&scene, grid.truncation_distance());
    (scene, grid)
}

/// Every voxel holds the exact plane distance `n·x + d` with gradient `n`.
pub fn linear_grid(n: Vector3<f64>, d: f64, dims: [usize; 3], voxel_size: f64) -> VoxelGrid {
    let n = n.normalize();
    let mut grid = VoxelGrid::new(Vector3::zeros(), dims, voxel_size, 5).unwrap();
    for i in 0..grid.len() {
        let idx = grid.index_of(i);
        let c = grid.voxel_center(idx);
        grid.set_voxel(
            idx,
            Voxel {
                psi: n.dot(&c) + d,
                weight: 5.0,
                gradient: n,
                mean_curvature: 0.0,
                gaussian_curvature: 0.0,
            },
        );
    }
    grid
}

/// Counts voxel reads made through it.
pub struct CountingSource<'a> {
    pub grid: &'a VoxelGrid,
    pub reads: Cell<usize>,
}

impl<'a> CountingSource<'a> {
    pub fn new(grid: &'a VoxelGrid) -> Self {
        CountingSource { grid, reads: Cell::new(0) }
    }

    pub fn take(&self) -> usize {
        self.reads.replace(0)
    }
}

impl VoxelSource for CountingSource<'_> {
    fn voxel_size(&self) -> f64 {
        self.grid.voxel_size()
    }
    fn truncation_distance(&self) -> f64 {
        self.grid.truncation_distance()
    }
    fn locate(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        self.grid.locate(p)
    }
    fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        self.grid.voxel_center(idx)
    }
    fn voxel(&self, idx: [usize; 3]) -> Voxel {
        self.reads.set(self.reads.get() + 1);
        self.grid.voxel(idx)
    }
}

/// Plain per-cube marching cubes, no masking and no vertex sharing.
/// Triangles with area at or below the extractor's degeneracy cutoff are dropped.
pub fn reference_marching_cubes(field: &ScalarField) -> Vec<[Vector3<f64>; 3]> {
    let [nx, ny, nz] = field.res;
    let spacing = field.spacing();
    let min_area = 1e-12 * spacing.norm_squared();
    let mut out = Vec::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let node = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let value = |c: usize| {
                    let (a, b, d) = node(c);
                    field.psi[field.index(a, b, d)]
                };
                let mut config = 0;
                for c in 0..8 {
                    if value(c) < 0.0 {
                        config |= 1 << c;
                    }
                }
                let point = |e: usize| {
                    let [a, b] = EDGES[e];
                    let (pa, pb) = (value(a), value(b));
                    let t = (pa / (pa - pb)).clamp(0.0, 1.0);
                    let (ia, ja, ka) = node(a);
                    let (ib, jb, kb) = node(b);
                    let xa = field.node(ia, ja, ka);
                    let xb = field.node(ib, jb, kb);
                    xa + (xb - xa) * t
                };
                for tri in TRI_TABLE[config].chunks(3).take_while(|t| t[0] >= 0) {
                    let t = [point(tri[0] as usize), point(tri[1] as usize), point(tri[2] as usize)];
                    if 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm() <= min_area {
                        continue;
                    }
                    out.push(t);
                }
            }
        }
    }
    out
}

/// Order-independent triangle keys: coordinates snapped to 1e-9, cyclically
/// rotated so the smallest vertex comes first (orientation is kept), then sorted.
pub fn canonical_triangles(tris: &[[Vector3<f64>; 3]]) -> Vec<[[i64; 3]; 3]> {
    let snap = |v: &Vector3<f64>| [(v.x * 1e9).round() as i64, (v.y * 1e9).round() as i64, (v.z * 1e9).round() as i64];
    let mut keys: Vec<[[i64; 3]; 3]> = tris
        .iter()
        .map(|t| {
            let s = [snap(&t[0]), snap(&t[1]), snap(&t[2])];
            let first = (0..3).min_by_key(|&i| s[i]).unwrap();
            [s[first], s[(first + 1) % 3], s[(first + 2) % 3]]
        })
        .collect();
    keys.sort_unstable();
    keys
}

pub fn mesh_triangles(mesh: &curvsdf::UncertainMesh) -> Vec<[Vector3<f64>; 3]> {
    (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect()
}

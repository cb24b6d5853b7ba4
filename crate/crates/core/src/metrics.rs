//! Chamfer and Hausdorff distances between surface samples.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::UncertainMesh;

pub const DEFAULT_SAMPLES: usize = 100_000;

/// Printed with every result so the chamfer variant is never ambiguous.
pub const CD_DEFINITION: &str = "0.5*(mean_a min_b |a-b| + mean_b min_a |a-b|)";

#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub points: Vec<Vector3<f64>>,
    /// Source triangle of each point, when sampled from a mesh.
    pub triangles: Vec<usize>,
    pub seed: u64,
}

impl PointSample {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        PointSample {
            points,
            triangles: Vec::new(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Area-weighted triangle choice, then a uniform point in the triangle.
pub fn sample_mesh(mesh: &UncertainMesh, n: usize, seed: u64) -> Result<PointSample> {
    if mesh.triangles.is_empty() {
        return Err(Error::invalid("cannot sample an empty mesh"));
    }
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let pick = WeightedIndex::new(&areas).map_err(|_| Error::invalid("mesh has zero total area"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut triangles = Vec::with_capacity(n);
    for _ in 0..n {
        let t = pick.sample(&mut rng);
        let [a, b, c] = mesh.triangle(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        points.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
        triangles.push(t);
    }
    Ok(PointSample { points, triangles, seed })
}

/// Uniform samples on a sphere surface.
pub fn sample_sphere(center: Vector3<f64>, radius: f64, n: usize, seed: u64) -> PointSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            center + Vector3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect();
    PointSample {
        points,
        triangles: Vec::new(),
        seed,
    }
}

/// Uniform-grid nearest-neighbour index.
pub struct NearestNeighbors<'a> {
    points: &'a [Vector3<f64>],
    min: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// `cell_start[c]..cell_start[c + 1]` indexes `order` for cell `c`.
    cell_start: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> NearestNeighbors<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("empty point set"));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("point coordinate".into()));
            }
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).max().max(1e-12);
        // roughly two points per cell along the largest axis
        let cells = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 256);
        let cell = extent / cells as f64;
        let dims = [0, 1, 2].map(|k| (((max[k] - min[k]) / cell).floor() as usize + 1).min(cells));
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(&min, cell, dims, p);
                c[0] + dims[0] * (c[1] + dims[1] * c[2])
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i as u32;
            fill[k] += 1;
        }
        Ok(NearestNeighbors {
            points,
            min,
            cell,
            dims,
            cell_start: counts,
            order,
        })
    }

    fn cell_of(min: &Vector3<f64>, cell: f64, dims: [usize; 3], p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - min[k]) / cell).floor();
            if c <= 0.0 {
                0
            } else {
                (c as usize).min(dims[k] - 1)
            }
        })
    }

    /// Distance from `q` to the closest indexed point.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let c = Self::cell_of(&self.min, self.cell, self.dims, q);
        let mut best = f64::INFINITY;
        let max_ring = *self.dims.iter().max().unwrap();
        for r in 0..=max_ring {
            let lo = c.map(|v| v as isize - r as isize);
            let hi = c.map(|v| v as isize + r as isize);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    let on_shell_yz = z == lo[2] || z == hi[2] || y == lo[1] || y == hi[1];
                    let xs: Vec<isize> = if on_shell_yz {
                        (lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1)).collect()
                    } else {
                        [lo[0], hi[0]]
                            .into_iter()
                            .filter(|&x| x >= 0 && x < self.dims[0] as isize)
                            .collect()
                    };
                    for x in xs {
                        let cell = x as usize + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                        for &i in &self.order[self.cell_start[cell]..self.cell_start[cell + 1]] {
                            let d = (self.points[i as usize] - q).norm();
                            if d < best {
                                best = d;
                            }
                        }
                    }
                    if r == 0 {
                        break;
                    }
                }
            }
            // every unvisited cell is at least r cells away
            if best <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Nearest-neighbour distance from each point of `a` to the set `b`.
pub fn directed_distances(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<Vec<f64>> {
    let index = NearestNeighbors::new(b)?;
    Ok(a.par_iter().map(|p| index.nearest_distance(p)).collect())
}

/// Exhaustive reference for [`directed_distances`].
pub fn directed_distances_brute(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Vec<f64> {
    a.iter()
        .map(|p| b.iter().map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub chamfer: f64,
    pub hausdorff: f64,
    /// `mean_a min_b`.
    pub mean_ab: f64,
    pub mean_ba: f64,
    pub max_ab: f64,
    pub max_ba: f64,
}

/// Chamfer and Hausdorff distances from one pair of nearest-neighbour sweeps.
pub fn compare(a: &PointSample, b: &PointSample) -> Result<DistanceReport> {
    let ab = directed_distances(&a.points, &b.points)?;
    let ba = directed_distances(&b.points, &a.points)?;
    let (mean_ab, mean_ba, max_ab, max_ba) = (mean(&ab), mean(&ba), max(&ab), max(&ba));
    Ok(DistanceReport {
        chamfer: 0.5 * (mean_ab + mean_ba),
        hausdorff: max_ab.max(max_ba),
        mean_ab,
        mean_ba,
        max_ab,
        max_ba,
    })
}

pub fn chamfer(a: &PointSample, b: &PointSample) -> Result<f64> {
    Ok(compare(a, b)?.chamfer)
}

pub fn hausdorff(a: &PointSample, b: &PointSample) -> Result<f64> {
    Ok(compare(a, b)?.hausdorff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: String,
    pub resolution: usize,
    pub cd: f64,
    pub hd: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dataset,method,resolution,cd,hd,n,seed,cd_definition")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:?},{:?},{},{},\"{}\"",
            r.dataset, r.method, r.resolution, r.cd, r.hd, r.n, r.seed, CD_DEFINITION
        )?;
    }
    out.flush()?;
    Ok(())
}

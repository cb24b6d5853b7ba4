//! Lattice evaluation of an implicit field and uncertainty-masked marching cubes.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::NeuralField;
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};
use crate::mesh::UncertainMesh;

/// Default uncertainty cutoff: corners with `w ≤ τ` are treated as unobserved.
pub const DEFAULT_TAU: f64 = 0.1;

/// Anything that can report `(ψ, w)` at a batch of points.
pub trait ImplicitField: Sync {
    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<Vec<(f64, f64)>>;
}

impl ImplicitField for NeuralField {
    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<Vec<(f64, f64)>> {
        self.forward_batch(points)
    }
}

/// Wraps a closure as a field, e.g. an analytic distance with a synthetic
/// uncertainty.
pub struct FnField<F>(pub F);

impl<F: Fn(&Vector3<f64>) -> (f64, f64) + Sync> ImplicitField for FnField<F> {
    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<Vec<(f64, f64)>> {
        Ok(points.iter().map(&self.0).collect())
    }
}

/// Field samples on a regular lattice spanning `[lo, hi]`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
    pub res: [usize; 3],
    pub psi: Vec<f64>,
    pub w: Vec<f64>,
}

impl ScalarField {
    pub fn new(lo: Vector3<f64>, hi: Vector3<f64>, res: [usize; 3]) -> Result<Self> {
        validate_lattice(&lo, &hi, res)?;
        let n = res[0] * res[1] * res[2];
        Ok(ScalarField {
            lo,
            hi,
            res,
            psi: vec![0.0; n],
            w: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.res[0] * (j + self.res[1] * k)
    }

    pub fn spacing(&self) -> Vector3<f64> {
        let d = self.hi - self.lo;
        Vector3::new(
            d.x / (self.res[0] - 1) as f64,
            d.y / (self.res[1] - 1) as f64,
            d.z / (self.res[2] - 1) as f64,
        )
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        lattice_node(&self.lo, &self.hi, self.res, i, j, k)
    }

    pub fn nodes(&self) -> Vec<Vector3<f64>> {
        let [nx, ny, nz] = self.res;
        let mut out = Vec::with_capacity(self.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.node(i, j, k));
                }
            }
        }
        out
    }
}

fn lattice_node(lo: &Vector3<f64>, hi: &Vector3<f64>, res: [usize; 3], i: usize, j: usize, k: usize) -> Vector3<f64> {
    let t = |a: usize, n: usize| a as f64 / (n - 1) as f64;
    Vector3::new(
        lo.x + (hi.x - lo.x) * t(i, res[0]),
        lo.y + (hi.y - lo.y) * t(j, res[1]),
        lo.z + (hi.z - lo.z) * t(k, res[2]),
    )
}

fn validate_lattice(lo: &Vector3<f64>, hi: &Vector3<f64>, res: [usize; 3]) -> Result<()> {
    if res.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!("lattice resolution must be at least 2 per axis, got {res:?}")));
    }
    if !(lo.iter().chain(hi.iter()).all(|v| v.is_finite()) && (hi - lo).iter().all(|d| *d > 0.0)) {
        return Err(Error::invalid("lattice bounds must be finite with hi > lo"));
    }
    Ok(())
}

/// Evaluates `field` at every lattice node, one z-slice per task.
pub fn evaluate_field<F: ImplicitField + ?Sized>(field: &F, lo: Vector3<f64>, hi: Vector3<f64>, res: [usize; 3]) -> Result<ScalarField> {
    let mut out = ScalarField::new(lo, hi, res)?;
    let [nx, ny, nz] = res;
    let slices: Vec<Vec<(f64, f64)>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let pts: Vec<Vector3<f64>> = (0..ny)
                .flat_map(|j| (0..nx).map(move |i| (i, j)))
                .map(|(i, j)| lattice_node(&lo, &hi, res, i, j, k))
                .collect();
            let vals = field.evaluate(&pts)?;
            if vals.len() != pts.len() {
                return Err(Error::invalid("field returned the wrong number of values"));
            }
            if let Some(bad) = vals.iter().position(|(p, w)| !p.is_finite() || !w.is_finite()) {
                let p = pts[bad];
                return Err(Error::NonFinite(format!(
                    "field value at node ({}, {}, {k}) = ({}, {}, {})",
                    bad % nx,
                    bad / nx,
                    p.x,
                    p.y,
                    p.z
                )));
            }
            Ok(vals)
        })
        .collect::<Result<_>>()?;
    for (k, vals) in slices.into_iter().enumerate() {
        let base = k * nx * ny;
        for (o, (p, w)) in vals.into_iter().enumerate() {
            out.psi[base + o] = p;
            out.w[base + o] = w;
        }
    }
    Ok(out)
}

/// Corner offsets in the table's numbering.
pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pair of each cube edge.
pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Table configuration of a cube: bit `c` set when corner `c` is outside (ψ < 0).
pub fn cube_index(psi: &[f64; 8]) -> usize {
    psi.iter().enumerate().filter(|(_, v)| **v < 0.0).fold(0, |acc, (c, _)| acc | (1 << c))
}

/// Triangulates `ψ = 0` with positive-inside orientation (counter-clockwise
/// seen from outside). A corner with `w ≤ tau` is invalid and every triangle
/// with a vertex on an edge touching an invalid corner is dropped, which opens
/// the surface where the field was never observed.
pub fn marching_cubes_uncertain(field: &ScalarField, tau: f64) -> Result<UncertainMesh> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must be in [0, 1), got {tau}")));
    }
    let [nx, ny, nz] = field.res;
    if field.psi.len() != nx * ny * nz || field.w.len() != field.psi.len() {
        return Err(Error::invalid("field arrays do not match its resolution"));
    }
    let n_nodes = field.len() as u64;
    let spacing = field.spacing();
    let min_area = 1e-12 * spacing.norm_squared();
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut uncertainty: Vec<f64> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut keyed: HashMap<u64, u32> = HashMap::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut idx = [0usize; 8];
                let mut psi = [0.0; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    idx[c] = field.index(i + off[0], j + off[1], k + off[2]);
                    psi[c] = field.psi[idx[c]];
                }
                let config = cube_index(&psi);
                if EDGE_TABLE[config] == 0 {
                    continue;
                }
                let valid = idx.map(|n| field.w[n] > tau);
                for tri in TRI_TABLE[config].chunks(3).take_while(|t| t[0] >= 0) {
                    let edges = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
                    if edges.iter().any(|&e| !valid[EDGES[e][0]] || !valid[EDGES[e][1]]) {
                        continue;
                    }
                    let mut corners = [0u32; 3];
                    for (slot, &e) in edges.iter().enumerate() {
                        let (a, b) = (idx[EDGES[e][0]], idx[EDGES[e][1]]);
                        let (pa, pb) = (field.psi[a], field.psi[b]);
                        let t = pa / (pa - pb);
                        // a vertex landing on a node is shared by every edge through it
                        let key = if t <= 0.0 {
                            3 * n_nodes + a as u64
                        } else if t >= 1.0 {
                            3 * n_nodes + b as u64
                        } else {
                            let (lo, hi) = (a.min(b), a.max(b));
                            let axis = match hi - lo {
                                1 => 0,
                                d if d == nx => 1,
                                _ => 2,
                            };
                            3 * lo as u64 + axis
                        };
                        corners[slot] = *keyed.entry(key).or_insert_with(|| {
                            let t = t.clamp(0.0, 1.0);
                            let (xa, xb) = (node_of(field, a), node_of(field, b));
                            vertices.push(xa + (xb - xa) * t);
                            uncertainty.push(field.w[a] + (field.w[b] - field.w[a]) * t);
                            (vertices.len() - 1) as u32
                        });
                    }
                    let [a, b, c] = corners;
                    if a == b || b == c || a == c {
                        continue;
                    }
                    let (va, vb, vc) = (vertices[a as usize], vertices[b as usize], vertices[c as usize]);
                    if 0.5 * (vb - va).cross(&(vc - va)).norm() <= min_area {
                        continue;
                    }
                    triangles.push([a, b, c]);
                }
            }
        }
    }
    let mut mesh = UncertainMesh::new(vertices, triangles)?;
    mesh.uncertainty = uncertainty;
    Ok(mesh)
}

fn node_of(field: &ScalarField, n: usize) -> Vector3<f64> {
    let [nx, ny, _] = field.res;
    field.node(n % nx, (n / nx) % ny, n / (nx * ny))
}

/// Convenience: lattice evaluation followed by masked extraction.
pub fn extract_mesh<F: ImplicitField + ?Sized>(
    field: &F,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    res: [usize; 3],
    tau: f64,
) -> Result<UncertainMesh> {
    marching_cubes_uncertain(&evaluate_field(field, lo, hi, res)?, tau)
}

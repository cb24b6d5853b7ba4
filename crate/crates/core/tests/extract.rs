mod common;

use std::collections::HashSet;

use common::{canonical_triangles, mesh_triangles, reference_marching_cubes};
use curvsdf::extract::{evaluate_field, extract_mesh, marching_cubes_uncertain, FnField, ImplicitField, ScalarField};
use curvsdf::nalgebra::Vector3;
use curvsdf::{Error, Result, UncertainMesh};
use proptest::prelude::*;

struct Counting<'a>(&'a std::sync::atomic::AtomicUsize);

impl ImplicitField for Counting<'_> {
    fn evaluate(&self, points: &[Vector3<f64>]) -> Result<Vec<(f64, f64)>> {
        self.0.fetch_add(points.len(), std::sync::atomic::Ordering::Relaxed);
        Ok(points.iter().map(|p| (p.x, 1.0)).collect())
    }
}

fn sphere(r: f64) -> FnField<impl Fn(&Vector3<f64>) -> (f64, f64) + Sync> {
    FnField(move |p: &Vector3<f64>| (r - p.norm(), 1.0))
}

fn cube() -> (Vector3<f64>, Vector3<f64>) {
    (Vector3::repeat(-1.0), Vector3::repeat(1.0))
}

#[test]
fn one_evaluation_per_node() {
    let n = std::sync::atomic::AtomicUsize::new(0);
    let (lo, hi) = cube();
    let f = evaluate_field(&Counting(&n), lo, hi, [2, 2, 2]).unwrap();
    assert_eq!(n.into_inner(), 8);
    assert_eq!(f.len(), 8);
    assert_eq!(f.psi[f.index(1, 0, 0)], 1.0);
    assert_eq!(f.psi[f.index(0, 1, 1)], -1.0);
}

#[test]
fn lattice_holds_the_analytic_values() {
    let (lo, hi) = cube();
    let f = evaluate_field(&FnField(|p: &Vector3<f64>| (p.x + 2.0 * p.y - p.z, 0.5)), lo, hi, [5, 4, 3]).unwrap();
    for k in 0..3 {
        for j in 0..4 {
            for i in 0..5 {
                let x = f.node(i, j, k);
                let n = f.index(i, j, k);
                assert!((f.psi[n] - (x.x + 2.0 * x.y - x.z)).abs() < 1e-15);
                assert_eq!(f.w[n], 0.5);
            }
        }
    }
    assert_eq!(f.nodes().len(), 60);
}

#[test]
fn sphere_is_closed_with_euler_characteristic_two() {
    let (lo, hi) = cube();
    let mesh = extract_mesh(&sphere(0.6), lo, hi, [40; 3], 0.1).unwrap();
    assert!(!mesh.is_empty());
    assert!(mesh.is_watertight());
    assert_eq!(mesh.euler_characteristic(), 2);
    // positive inside with outward winding encloses positive volume
    let v = mesh.signed_volume();
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.6f64.powi(3);
    assert!((v - exact).abs() < 0.02 * exact, "volume {v}");
}

#[test]
fn masked_half_opens_the_surface() {
    let (lo, hi) = cube();
    let f = FnField(|p: &Vector3<f64>| (0.6 - p.norm(), if p.x > 0.0 { 0.0 } else { 1.0 }));
    let mesh = extract_mesh(&f, lo, hi, [41; 3], 0.1).unwrap();
    assert!(!mesh.is_empty());
    assert!(!mesh.is_watertight());
    assert!(mesh.boundary_edge_count() > 0);
    assert!(mesh.vertices.iter().all(|v| v.x <= 1e-12));
}

#[test]
fn fully_unreliable_field_gives_empty_mesh() {
    let (lo, hi) = cube();
    let f = FnField(|p: &Vector3<f64>| (0.6 - p.norm(), 0.0));
    let mesh = extract_mesh(&f, lo, hi, [24; 3], 0.1).unwrap();
    assert!(mesh.is_empty());
    assert!(mesh.vertices.is_empty());
}

#[test]
fn matches_reference_marching_cubes_without_masking() {
    let (lo, hi) = cube();
    let f = FnField(|p: &Vector3<f64>| {
        let torus = 0.25 - ((p.x * p.x + p.y * p.y).sqrt() - 0.55).hypot(p.z);
        (torus.max(0.3 - (p - Vector3::new(0.1, -0.2, 0.3)).norm()), 1.0)
    });
    let field = evaluate_field(&f, lo, hi, [33, 29, 31]).unwrap();
    let mesh = marching_cubes_uncertain(&field, 0.0).unwrap();
    let ours = canonical_triangles(&mesh_triangles(&mesh));
    let reference = canonical_triangles(&reference_marching_cubes(&field));
    assert_eq!(ours.len(), reference.len());
    assert_eq!(ours, reference);
}

#[test]
fn vertices_sit_on_sign_changes() {
    let (lo, hi) = cube();
    let field = evaluate_field(&sphere(0.55), lo, hi, [27; 3]).unwrap();
    let mesh = marching_cubes_uncertain(&field, 0.1).unwrap();
    let h = field.spacing();
    for v in &mesh.vertices {
        let rel = (v - lo).component_div(&h);
        // exactly one coordinate is fractional: the vertex lies on a lattice edge
        let fractional: Vec<usize> = (0..3).filter(|&a| (rel[a] - rel[a].round()).abs() > 1e-9).collect();
        assert!(fractional.len() <= 1);
        let mut a = [0usize; 3];
        let mut b = [0usize; 3];
        for ax in 0..3 {
            if fractional.contains(&ax) {
                a[ax] = rel[ax].floor() as usize;
                b[ax] = a[ax] + 1;
            } else {
                a[ax] = rel[ax].round() as usize;
                b[ax] = a[ax];
            }
        }
        let pa = field.psi[field.index(a[0], a[1], a[2])];
        let pb = field.psi[field.index(b[0], b[1], b[2])];
        assert!(pa * pb <= 0.0, "no sign change under vertex {v:?}");
    }
}

#[test]
fn sphere_radius_within_one_and_a_half_cells() {
    let (lo, hi) = cube();
    let r = 0.7;
    let mesh = extract_mesh(&sphere(r), lo, hi, [64; 3], 0.1).unwrap();
    let cell = 2.0 / 63.0;
    for v in &mesh.vertices {
        assert!((v.norm() - r).abs() <= 1.5 * cell);
    }
    assert!(mesh.uncertainty.iter().all(|&w| w == 1.0));
}

#[test]
fn higher_tau_keeps_a_subset_of_triangles() {
    let (lo, hi) = cube();
    let f = FnField(|p: &Vector3<f64>| (0.6 - p.norm(), (0.5 + 0.5 * p.x).clamp(0.0, 1.0)));
    let field = evaluate_field(&f, lo, hi, [32; 3]).unwrap();
    let mut previous: Option<HashSet<[[i64; 3]; 3]>> = None;
    for tau in [0.0, 0.2, 0.4, 0.6, 0.8] {
        let tris: HashSet<_> = canonical_triangles(&mesh_triangles(&marching_cubes_uncertain(&field, tau).unwrap()))
            .into_iter()
            .collect();
        if let Some(prev) = &previous {
            assert!(tris.is_subset(prev));
            assert!(tris.len() < prev.len());
        }
        previous = Some(tris);
    }
}

#[test]
fn no_degenerate_triangles_when_nodes_touch_the_surface() {
    // r = 0.5 on a lattice with spacing 0.125 puts vertices exactly on nodes
    let (lo, hi) = cube();
    let mesh = extract_mesh(&sphere(0.5), lo, hi, [17; 3], 0.1).unwrap();
    assert!(!mesh.is_empty());
    for t in &mesh.triangles {
        assert!(t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
    }
    assert!((0..mesh.triangles.len()).all(|t| mesh.triangle_area(t) > 0.0));
}

#[test]
fn rejects_bad_arguments() {
    let (lo, hi) = cube();
    assert!(matches!(ScalarField::new(lo, hi, [1, 4, 4]), Err(Error::InvalidArgument(_))));
    assert!(matches!(ScalarField::new(hi, lo, [4, 4, 4]), Err(Error::InvalidArgument(_))));
    let field = ScalarField::new(lo, hi, [4, 4, 4]).unwrap();
    assert!(marching_cubes_uncertain(&field, 1.0).is_err());
    assert!(marching_cubes_uncertain(&field, -0.1).is_err());
    let nan = FnField(|_: &Vector3<f64>| (f64::NAN, 1.0));
    assert!(matches!(evaluate_field(&nan, lo, hi, [3, 3, 3]), Err(Error::NonFinite(_))));
}

#[test]
fn mesh_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (lo, hi) = cube();
    let f = FnField(|p: &Vector3<f64>| (0.5 - p.norm(), (0.6 + 0.3 * p.z).clamp(0.0, 1.0)));
    let mesh = extract_mesh(&f, lo, hi, [20; 3], 0.1).unwrap();
    let check = |back: &UncertainMesh, quality: bool| {
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
        if quality {
            for (a, b) in back.uncertainty.iter().zip(&mesh.uncertainty) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    };
    let ascii = dir.path().join("a.ply");
    mesh.write_ply_ascii(&ascii).unwrap();
    check(&UncertainMesh::load(&ascii).unwrap(), true);
    let binary = dir.path().join("b.ply");
    mesh.write_ply_binary(&binary).unwrap();
    check(&UncertainMesh::load(&binary).unwrap(), true);
    let obj = dir.path().join("c.obj");
    mesh.write_obj(&obj).unwrap();
    check(&UncertainMesh::load(&obj).unwrap(), false);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_spheres_close_up(
        cx in -0.2..0.2f64,
        cy in -0.2..0.2f64,
        cz in -0.2..0.2f64,
        r in 0.25..0.6f64,
        res in 12usize..30,
    ) {
        let c = Vector3::new(cx, cy, cz);
        let (lo, hi) = cube();
        let mesh = extract_mesh(&FnField(move |p: &Vector3<f64>| (r - (p - c).norm(), 1.0)), lo, hi, [res; 3], 0.1).unwrap();
        prop_assert!(mesh.is_watertight());
        prop_assert_eq!(mesh.euler_characteristic(), 2);
        prop_assert!(mesh.signed_volume() > 0.0);
    }
}

mod common;

use common::{fuse, fused_sphere, render_views};
use curvsdf::diffgeo::{frame_geometry, StencilParams};
use curvsdf::grid::{WeightDecay, GRID_MAGIC};
use curvsdf::nalgebra::Vector3;
use curvsdf::render::{fibonacci_poses, render_depth, Scene};
use curvsdf::{Association, DepthFrame, Error, Intrinsics, IntegrationParams, Pose, Shape, Voxel, VoxelGrid};
use proptest::prelude::*;

const MODES: [Association; 2] = [Association::Nearest, Association::Projective];

fn params(association: Association, decay: WeightDecay) -> IntegrationParams {
    IntegrationParams { decay, association }
}

/// Camera at the origin looking at the solid `z ≥ 1`.
fn wall() -> DepthFrame {
    let shape = Shape::HalfSpace {
        normal: [0.0, 0.0, 1.0],
        offset: 1.0,
    };
    let k = Intrinsics::from_fov(64, 48, 60.0).unwrap();
    render_depth(Scene::Analytic(&shape), &Pose::identity(), &k).unwrap()
}

/// 5×5×11 grid centred on the wall point seen by the principal pixel.
fn wall_grid(vs: f64) -> VoxelGrid {
    VoxelGrid::new(Vector3::new(0.0, 0.0, 1.0), [5, 5, 11], vs, 5).unwrap()
}

#[test]
fn create_grid_examples() {
    let g = VoxelGrid::new(Vector3::zeros(), [64; 3], 0.008, 5).unwrap();
    assert_eq!(g.len(), 262_144);
    assert!((0..g.len()).all(|i| g.voxel_at(i) == Voxel::default()));
    assert_eq!(g.observed_count(), 0);

    let c = Vector3::new(0.3, -0.2, 1.0);
    let one = VoxelGrid::new(c, [1, 1, 1], 0.01, 5).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.voxel_center([0, 0, 0]), c);

    assert!(matches!(VoxelGrid::new(c, [4; 3], 0.0, 5), Err(Error::InvalidArgument(_))));
    assert!(VoxelGrid::new(c, [4; 3], -0.1, 5).is_err());
    assert!(VoxelGrid::new(c, [4, 0, 4], 0.1, 5).is_err());
    assert!(VoxelGrid::new(c, [4; 3], 0.1, 0).is_err());
}

#[test]
fn locate_examples() {
    let g = VoxelGrid::new(Vector3::zeros(), [8; 3], 1.0, 5).unwrap();
    let mid = g.locate(&Vector3::zeros()).unwrap();
    assert_eq!(mid, [4, 4, 4]);
    assert_eq!(g.voxel_center(mid), Vector3::zeros());
    assert_eq!(g.locate(&Vector3::new(0.4, 1.6, -0.2)), Some([4, 6, 4]));
    assert_eq!(g.locate(&Vector3::new(10.0, 0.0, 0.0)), None);
    assert_eq!(g.locate(&Vector3::new(0.0, -4.6, 0.0)), None);
}

#[test]
fn voxel_on_surface_gets_zero_distance_full_weight() {
    let frame = wall();
    let geom = frame_geometry(&frame, &StencilParams::default());
    for mode in MODES {
        let mut g = wall_grid(0.01);
        g.integrate(&frame, &geom, &params(mode, WeightDecay::Inside));
        let v = g.voxel([2, 2, 5]);
        assert!(v.psi.abs() < 1e-6, "{mode:?}");
        assert_eq!(v.weight, 1.0);
        assert!((v.unit_gradient() - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
        assert!(v.mean_curvature.abs() < 1e-9);
    }
}

#[test]
fn weight_decays_behind_the_surface() {
    let frame = wall();
    let geom = frame_geometry(&frame, &StencilParams::default());
    for mode in MODES {
        let mut g = wall_grid(0.01);
        g.integrate(&frame, &geom, &params(mode, WeightDecay::Inside));
        // two voxels behind the wall, T = 5
        let behind = g.voxel([2, 2, 7]);
        assert!((behind.weight - 0.6).abs() < 1e-6, "{mode:?}: {}", behind.weight);
        assert!((behind.psi - 0.02).abs() < 1e-6);
        // in front of the wall the weight stays 1
        let front = g.voxel([2, 2, 3]);
        assert!((front.weight - 1.0).abs() < 1e-12);
        assert!((front.psi + 0.02).abs() < 1e-6);
        // every updated voxel stays inside the band
        for i in 0..g.len() {
            let v = g.voxel_at(i);
            if v.is_observed() {
                assert!(v.psi.abs() <= g.truncation_distance() + g.voxel_size());
            }
        }
    }
}

#[test]
fn flipped_decay_mirrors_weights() {
    let frame = wall();
    let geom = frame_geometry(&frame, &StencilParams::default());
    let mut g = wall_grid(0.01);
    g.integrate(&frame, &geom, &params(Association::Nearest, WeightDecay::Outside));
    assert!((g.voxel([2, 2, 3]).weight - 0.6).abs() < 1e-6);
    assert!((g.voxel([2, 2, 7]).weight - 1.0).abs() < 1e-12);
}

#[test]
fn equal_weight_average() {
    let frame = wall();
    let geom = frame_geometry(&frame, &StencilParams::default());
    for mode in MODES {
        // the voxel 0.4 behind the wall, T·v_s = 0.5, full weight on the far side
        let mut g = VoxelGrid::new(Vector3::new(0.0, 0.0, 1.4), [3, 3, 3], 0.1, 5).unwrap();
        g.set_voxel(
            [1, 1, 1],
            Voxel {
                psi: 0.2,
                weight: 1.0,
                gradient: Vector3::new(0.0, 0.0, 1.0),
                ..Voxel::default()
            },
        );
        g.integrate(&frame, &geom, &params(mode, WeightDecay::Outside));
        let v = g.voxel([1, 1, 1]);
        assert!((v.psi - 0.3).abs() < 1e-6, "{mode:?}: {}", v.psi);
        assert_eq!(v.weight, 2.0);
    }
}

#[test]
fn identical_frames_only_scale_weight() {
    let shape = Shape::sphere(Vector3::zeros(), 0.2);
    let k = Intrinsics::from_fov(96, 72, 60.0).unwrap();
    let frames = render_views(&shape, &fibonacci_poses(Vector3::zeros(), 0.7, 1), &k);
    let mut once = VoxelGrid::new(Vector3::zeros(), [40; 3], 0.012, 5).unwrap();
    fuse(&mut once, &frames, &StencilParams::default());
    let mut thrice = once.clone();
    fuse(&mut thrice, &frames, &StencilParams::default());
    fuse(&mut thrice, &frames, &StencilParams::default());
    assert!(once.observed_count() > 1000);
    for i in 0..once.len() {
        let (a, b) = (once.voxel_at(i), thrice.voxel_at(i));
        assert!((b.weight - 3.0 * a.weight).abs() < 1e-12);
        assert!((a.psi - b.psi).abs() < 1e-12);
        assert!((a.unit_gradient() - b.unit_gradient()).norm() < 1e-12);
        assert!((a.mean_curvature - b.mean_curvature).abs() < 1e-9);
    }
}

#[test]
fn weights_never_decrease() {
    let shape = Shape::Torus {
        center: [0.0; 3],
        major_radius: 0.15,
        minor_radius: 0.06,
    };
    let k = Intrinsics::from_fov(96, 72, 60.0).unwrap();
    let frames = render_views(&shape, &fibonacci_poses(Vector3::zeros(), 0.7, 6), &k);
    for mode in MODES {
        let mut g = VoxelGrid::new(Vector3::zeros(), [40; 3], 0.01, 5).unwrap();
        let mut prev = g.weights().to_vec();
        for f in &frames {
            let geom = frame_geometry(f, &StencilParams::default());
            g.integrate(f, &geom, &params(mode, WeightDecay::Inside));
            assert!(g.weights().iter().zip(&prev).all(|(w, p)| w >= p));
            prev = g.weights().to_vec();
        }
        assert!(g.observed_count() > 1000);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn fused_sphere_matches_closed_form() {
    let (shape, g) = fused_sphere(8);
    let vs = g.voxel_size();
    let (mut total, mut close, mut angles) = (0, 0, Vec::new());
    for i in 0..g.len() {
        let v = g.voxel_at(i);
        if !v.is_observed() {
            continue;
        }
        let c = g.voxel_center(g.index_of(i));
        let exact = shape.sdf(&c);
        if exact.abs() > g.truncation_distance() {
            continue;
        }
        total += 1;
        if (v.psi - exact).abs() <= vs / 2.0 {
            close += 1;
        }
        angles.push(v.unit_gradient().dot(&shape.gradient(&c)).clamp(-1.0, 1.0).acos().to_degrees());
    }
    assert!(total > 10_000);
    assert!(close as f64 >= 0.95 * total as f64, "{close}/{total}");
    assert!(median(angles) <= 10.0);
}

#[test]
fn extracted_points_of_fused_unit_sphere() {
    let shape = Shape::sphere(Vector3::zeros(), 1.0);
    let k = Intrinsics::from_fov(160, 120, 60.0).unwrap();
    let frames = render_views(&shape, &fibonacci_poses(Vector3::zeros(), 3.0, 8), &k);
    let vs = 0.04;
    let mut g = VoxelGrid::new(Vector3::zeros(), [64; 3], vs, 5).unwrap();
    fuse(
        &mut g,
        &frames,
        &StencilParams {
            max_depth_jump: 10.0 * vs,
            ..StencilParams::default()
        },
    );
    let pts = g.extract_points(1.0);
    assert!(pts.len() > 1000);
    for (i, p) in pts.positions.iter().enumerate() {
        assert!((p.norm() - 1.0).abs() <= vs / 2.0, "radius {}", p.norm());
        assert!((pts.normals[i].norm() - 1.0).abs() < 1e-6);
        let c = g.voxel_center(g.index_of(pts.voxels[i]));
        assert!(((p - c).norm() - g.voxel_at(pts.voxels[i]).psi.abs()).abs() < 1e-12);
    }
}

#[test]
fn extract_points_formula() {
    let vs = 0.1;
    let mut g = VoxelGrid::new(Vector3::zeros(), [3; 3], vs, 5).unwrap();
    let gx = Vector3::new(1.0, 0.0, 0.0);
    g.set_voxel([1, 1, 1], Voxel { psi: 0.0, weight: 1.0, gradient: gx, ..Voxel::default() });
    g.set_voxel([2, 1, 1], Voxel { psi: 0.5 * vs, weight: 2.0, gradient: gx * 3.0, ..Voxel::default() });
    g.set_voxel([0, 0, 0], Voxel { psi: 0.0, weight: 0.5, gradient: gx, ..Voxel::default() });
    let pts = g.extract_points(1.0);
    assert_eq!(pts.len(), 2);
    assert_eq!(pts.positions[0], g.voxel_center([1, 1, 1]));
    assert!((pts.positions[1] - (g.voxel_center([2, 1, 1]) - Vector3::new(0.5 * vs, 0.0, 0.0))).norm() < 1e-15);
    assert_eq!(pts.normals[1], gx);
    assert!(g.extract_points(0.1).len() == 3);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, g) = fused_sphere(4);
    let path = dir.path().join("g.csdf");
    g.save(&path).unwrap();
    assert_eq!(VoxelGrid::load(&path).unwrap(), g);

    let empty = VoxelGrid::new(Vector3::new(1.0, 2.0, 3.0), [3, 4, 5], 0.25, 3).unwrap();
    empty.save(&path).unwrap();
    let back = VoxelGrid::load(&path).unwrap();
    assert_eq!(back, empty);
    assert_eq!(back.observed_count(), 0);
}

#[test]
fn corrupt_files_are_rejected() {
    let g = VoxelGrid::new(Vector3::zeros(), [2, 2, 2], 0.1, 5).unwrap();
    let mut bytes = Vec::new();
    g.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], GRID_MAGIC);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(VoxelGrid::read_from(&mut bad.as_slice()), Err(Error::Format(_))));

    let mut version = bytes.clone();
    version[4] = 99;
    assert!(VoxelGrid::read_from(&mut version.as_slice()).is_err());

    let truncated = &bytes[..bytes.len() - 3];
    assert!(VoxelGrid::read_from(&mut &truncated[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn locate_inverts_voxel_center(
        dims in prop::array::uniform3(1usize..12),
        c in prop::array::uniform3(-2.0..2.0f64),
        vs in 0.01..0.5f64,
        frac in prop::array::uniform3(0.0..1.0f64),
        jitter in prop::array::uniform3(-0.49..0.49f64),
    ) {
        let g = VoxelGrid::new(Vector3::new(c[0], c[1], c[2]), dims, vs, 5).unwrap();
        let idx = [0, 1, 2].map(|k| ((frac[k] * dims[k] as f64) as usize).min(dims[k] - 1));
        let p = g.voxel_center(idx) + Vector3::new(jitter[0], jitter[1], jitter[2]) * vs;
        prop_assert_eq!(g.locate(&p), Some(idx));
        prop_assert_eq!(g.index_of(g.linear_index(idx)), idx);
    }
}

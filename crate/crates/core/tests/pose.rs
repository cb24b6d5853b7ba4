mod common;

use common::tracking_scene;
use curvsdf::nalgebra::{Rotation3, Unit, Vector3};
use curvsdf::render::{render_depth, Scene};
use curvsdf::tracking::{sample_distance, MIN_CORRESPONDENCES};
use curvsdf::{estimate_pose, DepthFrame, Error, Intrinsics, Pose, Shape, TrackingParams, VoxelGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn truth() -> Pose {
    Pose::look_at(Vector3::new(0.15, 0.18, -0.45), Vector3::new(0.0, -0.05, 0.0), Vector3::y()).unwrap()
}

fn intrinsics() -> Intrinsics {
    Intrinsics::from_fov(160, 120, 60.0).unwrap()
}

/// 2° about a fixed axis and 2 cm of translation away from `p`.
fn perturbed(p: &Pose) -> Pose {
    let axis = Unit::new_normalize(Vector3::new(0.3, -0.8, 0.5));
    let shift = Vector3::new(1.0, -0.8, 1.0).normalize() * 0.02;
    Pose::new(Rotation3::from_axis_angle(&axis, 2f64.to_radians()) * p.rotation, p.translation + shift)
}

fn errors(a: &Pose, b: &Pose) -> (f64, f64) {
    (a.rotation_angle_to(b).to_degrees(), a.translation_distance_to(b))
}

#[test]
fn zero_residual_at_the_true_pose() {
    // trilinear interpolation is exact on a plane, so every residual vanishes
    let plane = Shape::HalfSpace {
        normal: Vector3::new(0.2, -1.0, 0.3).normalize().into(),
        offset: 0.05,
    };
    let mut grid = VoxelGrid::new(Vector3::zeros(), [64; 3], 0.01, 5).unwrap();
    grid.fill_from_shape(&plane, grid.truncation_distance());
    let frame = render_depth(Scene::Analytic(&plane), &truth(), &intrinsics()).unwrap();
    let est = estimate_pose(&grid, &frame, &truth(), &TrackingParams::default()).unwrap();
    assert!(est.converged);
    assert!(est.last_update_norm < 1e-8, "{}", est.last_update_norm);
    assert!(est.final_cost < 1e-20);
}

#[test]
fn true_pose_is_a_fixed_point_on_curved_scenes() {
    let (scene, grid) = tracking_scene();
    let frame = render_depth(Scene::Analytic(&scene), &truth(), &intrinsics()).unwrap();
    let est = estimate_pose(&grid, &frame, &truth(), &TrackingParams::default()).unwrap();
    // the interpolated grid's optimum sits a fraction of a millimetre from the truth
    let (r, t) = errors(&est.pose, &truth());
    assert!(r < 0.05 && t < 5e-4, "{r} deg {t} m");
}

#[test]
fn recovers_small_perturbation() {
    let (scene, grid) = tracking_scene();
    let frame = render_depth(Scene::Analytic(&scene), &truth(), &intrinsics()).unwrap();
    let init = perturbed(&truth());
    let (r0, t0) = errors(&init, &truth());
    assert!((r0 - 2.0).abs() < 1e-9 && (t0 - 0.02).abs() < 1e-12);
    let est = estimate_pose(&grid, &frame, &init, &TrackingParams::default()).unwrap();
    let (r, t) = errors(&est.pose, &truth());
    assert!(r <= 0.2, "rotation error {r} deg");
    assert!(t <= 0.002, "translation error {t} m");
}

#[test]
fn empty_grid_has_no_correspondences() {
    let (scene, _) = tracking_scene();
    let grid = VoxelGrid::new(Vector3::zeros(), [32; 3], 0.02, 5).unwrap();
    let frame = render_depth(Scene::Analytic(&scene), &truth(), &intrinsics()).unwrap();
    match estimate_pose(&grid, &frame, &truth(), &TrackingParams::default()) {
        Err(Error::InsufficientCorrespondences { found, required }) => {
            assert_eq!(found, 0);
            assert_eq!(required, MIN_CORRESPONDENCES);
        }
        other => panic!("expected insufficient correspondences, got {other:?}"),
    }
}

#[test]
fn cost_never_increases_with_more_iterations() {
    let (scene, grid) = tracking_scene();
    let frame = render_depth(Scene::Analytic(&scene), &truth(), &intrinsics()).unwrap();
    let init = perturbed(&truth());
    let mut prev = f64::INFINITY;
    for iters in 1..=8 {
        let params = TrackingParams {
            max_iters: iters,
            ..TrackingParams::default()
        };
        let est = estimate_pose(&grid, &frame, &init, &params).unwrap();
        assert!(est.final_cost <= prev, "iteration {iters}: {} > {prev}", est.final_cost);
        prev = est.final_cost;
    }
}

#[test]
fn depth_noise_degrades_gracefully() {
    let (scene, grid) = tracking_scene();
    let clean = render_depth(Scene::Analytic(&scene), &truth(), &intrinsics()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let noisy: Vec<f64> = clean
        .depths()
        .iter()
        .map(|&z| if z > 0.0 { z * (1.0 + 0.005 * unit.sample(&mut rng)) } else { 0.0 })
        .collect();
    let noisy = DepthFrame::from_depths(noisy, clean.intrinsics, clean.pose).unwrap();
    let init = perturbed(&truth());
    let a = estimate_pose(&grid, &clean, &init, &TrackingParams::default()).unwrap();
    let b = estimate_pose(&grid, &noisy, &init, &TrackingParams::default()).unwrap();
    let (ra, ta) = errors(&a.pose, &truth());
    let (rb, tb) = errors(&b.pose, &truth());
    assert!(rb <= 5.0 * ra && tb <= 5.0 * ta);
}

#[test]
fn trilinear_distance_matches_scene_inside_band() {
    let (scene, grid) = tracking_scene();
    let p = Vector3::new(-0.1, 0.0, 0.05 + 0.12 - 0.004);
    let (psi, g, w) = sample_distance(&grid, &p, 1.0).unwrap();
    assert!((psi - scene.sdf(&p)).abs() < 1e-4);
    assert!(g.norm() > 0.0);
    assert!((w - 1.0).abs() < 1e-12);
    assert!(sample_distance(&grid, &Vector3::new(0.0, 0.2, 0.0), 1.0).is_none());
}

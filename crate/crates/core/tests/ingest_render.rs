mod common;

use curvsdf::ingest::{load_depth_frame, load_trajectory, parse_trajectory, save_depth_pgm, save_depth_png, save_trajectory, StampedPose, TUM_DEPTH_SCALE};
use curvsdf::nalgebra::{Rotation3, UnitQuaternion, Vector3};
use curvsdf::render::{render_depth, Scene};
use curvsdf::{DepthFrame, Error, Intrinsics, Pose, Shape, UncertainMesh};
use proptest::prelude::*;

fn unit_k(w: usize, h: usize) -> Intrinsics {
    Intrinsics::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap()
}

#[test]
fn png_ticks_are_scaled_and_zero_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let k = Intrinsics::from_fov(4, 3, 60.0).unwrap();
    let mut d = vec![1.0; 12];
    d[5] = 0.0;
    let frame = DepthFrame::from_depths(d, k, Pose::identity()).unwrap();
    let path = dir.path().join("d.png");
    save_depth_png(&frame, TUM_DEPTH_SCALE, &path).unwrap();
    let back = load_depth_frame(&path, TUM_DEPTH_SCALE, k).unwrap();
    assert_eq!(back.depth(0, 0), 1.0);
    assert!(back.is_valid(0, 0));
    let (m, n) = (5 % 4, 5 / 4);
    assert_eq!(back.depth(m, n), 0.0);
    assert!(!back.is_valid(m, n));
    assert_eq!(back.valid_count(), 11);
}

#[test]
fn pgm_round_trip_with_custom_scale() {
    let dir = tempfile::tempdir().unwrap();
    let k = Intrinsics::from_fov(5, 4, 60.0).unwrap();
    let d: Vec<f64> = (0..20).map(|i| 0.5 + i as f64 * 0.001).collect();
    let frame = DepthFrame::from_depths(d.clone(), k, Pose::identity()).unwrap();
    let path = dir.path().join("d.pgm");
    save_depth_pgm(&frame, 1000.0, &path).unwrap();
    let back = load_depth_frame(&path, 1000.0, k).unwrap();
    for (a, b) in back.depths().iter().zip(&d) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn image_size_must_match_intrinsics() {
    let dir = tempfile::tempdir().unwrap();
    let big = Intrinsics::from_fov(640, 480, 60.0).unwrap();
    let small = Intrinsics::from_fov(320, 240, 60.0).unwrap();
    let frame = DepthFrame::from_depths(vec![1.0; 640 * 480], big, Pose::identity()).unwrap();
    let path = dir.path().join("d.png");
    save_depth_png(&frame, TUM_DEPTH_SCALE, &path).unwrap();
    match load_depth_frame(&path, TUM_DEPTH_SCALE, small) {
        Err(Error::DimensionMismatch { expected_w, expected_h, found_w, found_h }) => {
            assert_eq!((expected_w, expected_h, found_w, found_h), (320, 240, 640, 480));
        }
        other => panic!("expected dimension mismatch, got {other:?}"),
    }
}

#[test]
fn trajectory_lines() {
    let id = parse_trajectory("0.0 0 0 0 0 0 0 1").unwrap();
    assert_eq!(id.len(), 1);
    assert!(id[0].pose.rotation_angle_to(&Pose::identity()) < 1e-15);
    assert_eq!(id[0].pose.translation, Vector3::zeros());

    let t = parse_trajectory("1.0 1 2 3 0 0 0 1").unwrap();
    assert_eq!(t[0].timestamp, 1.0);
    assert_eq!(t[0].pose.translation, Vector3::new(1.0, 2.0, 3.0));
    assert!(t[0].pose.rotation_angle_to(&Pose::identity()) < 1e-15);

    assert!(matches!(parse_trajectory("1.0 1 2 3 0 0 0"), Err(Error::Format(_))));
}

#[test]
fn trajectory_is_sorted_and_quaternions_normalized() {
    let traj = parse_trajectory("# header\n2.0 0 0 0 0 0 0 2\n1.0 0 0 0 0 0 1 1\n").unwrap();
    assert_eq!(traj[0].timestamp, 1.0);
    assert_eq!(traj[1].timestamp, 2.0);
    let angle = traj[0].pose.rotation_angle_to(&Pose::identity());
    assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn backprojection_examples() {
    let f = DepthFrame::from_depths(vec![2.0], unit_k(1, 1), Pose::identity()).unwrap();
    assert_eq!(f.backproject(0, 0).unwrap(), Vector3::new(0.0, 0.0, 2.0));

    let k2 = Intrinsics::new(2.0, 2.0, 0.0, 0.0, 3, 1).unwrap();
    let f = DepthFrame::from_depths(vec![2.0; 3], k2, Pose::identity()).unwrap();
    assert!((f.backproject(2, 0).unwrap() - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-15);

    let f = DepthFrame::from_depths(vec![2.0], unit_k(1, 1), Pose::from_translation(Vector3::new(0.0, 0.0, 1.0))).unwrap();
    assert_eq!(f.backproject(0, 0).unwrap(), Vector3::new(0.0, 0.0, 3.0));

    let f = DepthFrame::from_depths(vec![0.0], unit_k(1, 1), Pose::identity()).unwrap();
    assert!(matches!(f.backproject(0, 0), Err(Error::InvalidPixel { m: 0, n: 0 })));
}

fn plane_z1() -> Shape {
    // solid behind z = 1 as seen from the origin
    Shape::HalfSpace {
        normal: [0.0, 0.0, 1.0],
        offset: 1.0,
    }
}

#[test]
fn render_plane_center_pixel() {
    let k = Intrinsics::from_fov(65, 49, 60.0).unwrap();
    let f = render_depth(Scene::Analytic(&plane_z1()), &Pose::identity(), &k).unwrap();
    assert!((f.depth(32, 24) - 1.0).abs() < 1e-6);
}

#[test]
fn render_sphere_center_pixel() {
    let k = Intrinsics::from_fov(65, 49, 60.0).unwrap();
    let s = Shape::sphere(Vector3::new(0.0, 0.0, 3.0), 1.0);
    let f = render_depth(Scene::Analytic(&s), &Pose::identity(), &k).unwrap();
    let (m, n) = (k.cx.floor() as usize, k.cy.floor() as usize);
    let ray = k.ray(m as f64, n as f64);
    // closed-form ray/sphere intersection along the pixel ray, converted to z-depth
    let d = ray.normalize();
    let c = Vector3::new(0.0, 0.0, 3.0);
    let b = d.dot(&c);
    let t = b - (b * b - (c.norm_squared() - 1.0)).sqrt();
    assert!((f.depth(m, n) - t * d.z).abs() < 1e-4);
    assert!((f.depth(m, n) - 2.0).abs() < 1e-2);
}

#[test]
fn camera_looking_away_sees_nothing() {
    let k = Intrinsics::from_fov(32, 24, 60.0).unwrap();
    let s = Shape::sphere(Vector3::new(0.0, 0.0, -3.0), 1.0);
    let f = render_depth(Scene::Analytic(&s), &Pose::identity(), &k).unwrap();
    assert_eq!(f.valid_count(), 0);
}

#[test]
fn backprojected_plane_pixels_lie_on_plane() {
    let k = Intrinsics::from_fov(80, 60, 70.0).unwrap();
    let n = Vector3::new(0.2, -0.3, 1.0).normalize();
    let plane = Shape::HalfSpace {
        normal: n.into(),
        offset: 1.5,
    };
    let pose = Pose::new(Rotation3::from_euler_angles(0.05, -0.1, 0.3), Vector3::new(0.1, 0.0, -0.2));
    let f = render_depth(Scene::Analytic(&plane), &pose, &k).unwrap();
    assert!(f.valid_count() > 4000);
    for j in 0..60 {
        for i in 0..80 {
            if f.is_valid(i, j) {
                let x = f.backproject(i, j).unwrap();
                assert!((n.dot(&x) - 1.5).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn mesh_and_analytic_sphere_render_alike() {
    let mesh = UncertainMesh::icosphere(Vector3::zeros(), 1.0, 5);
    assert!(mesh.triangles.len() >= 10_000);
    let shape = Shape::sphere(Vector3::zeros(), 1.0);
    let k = Intrinsics::from_fov(48, 36, 50.0).unwrap();
    let pose = Pose::look_at(Vector3::new(0.3, 0.2, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
    let a = render_depth(Scene::Analytic(&shape), &pose, &k).unwrap();
    let b = render_depth(Scene::Mesh(&mesh), &pose, &k).unwrap();
    // Silhouette rays meet the faceted surface at grazing incidence, where the
    // chord gap is divided by the incidence cosine; those pixels are counted
    // separately with the same cutoff the curvature stencil uses.
    let (mut compared, mut grazing) = (0, 0);
    for j in 0..36 {
        for i in 0..48 {
            if a.is_valid(i, j) && b.is_valid(i, j) {
                let x = a.backproject(i, j).unwrap();
                let cos = x.normalize().dot(&(x - pose.translation).normalize()).abs();
                if cos < 0.3 {
                    grazing += 1;
                    continue;
                }
                compared += 1;
                assert!((a.depth(i, j) - b.depth(i, j)).abs() < 1e-3, "pixel ({i}, {j})");
            }
        }
    }
    assert!(compared > 300);
    assert!(grazing * 5 < compared);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_round_trip(
        entries in prop::collection::vec(
            (0.0..1e4f64, prop::array::uniform3(-10.0..10.0f64), prop::array::uniform3(-3.2..3.2f64)),
            1..12,
        )
    ) {
        let poses: Vec<StampedPose> = entries
            .iter()
            .enumerate()
            .map(|(i, (ts, t, r))| StampedPose {
                timestamp: ts + i as f64 * 1e4,
                pose: Pose::from_quaternion(
                    UnitQuaternion::from_euler_angles(r[0], r[1] / 2.0, r[2]),
                    Vector3::new(t[0], t[1], t[2]),
                ),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        save_trajectory(&poses, &path).unwrap();
        let back = load_trajectory(&path).unwrap();
        prop_assert_eq!(back.len(), poses.len());
        for (a, b) in back.iter().zip(&poses) {
            prop_assert_eq!(a.timestamp, b.timestamp);
            prop_assert!((a.pose.rotation.matrix() - b.pose.rotation.matrix()).abs().max() < 1e-9);
            prop_assert!((a.pose.translation - b.pose.translation).abs().max() < 1e-9);
        }
    }
}

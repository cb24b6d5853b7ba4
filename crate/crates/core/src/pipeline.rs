//! Stage drivers behind the command-line tool. Each stage writes its
//! artifacts plus a `manifest.json` into `<output_dir>/<stage>/`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Unit, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::camera::{Intrinsics, Pose};
use crate::config::{PipelineConfig, SourceConfig, SyntheticSource, ViewLayout};
use crate::diffgeo::frame_geometry;
use crate::error::{Error, Result};
use crate::extract::{evaluate_field, marching_cubes_uncertain, FnField};
use crate::field::{init_network, train, write_loss_history, NeuralField};
use crate::grid::{IntegrationParams, VoxelGrid};
use crate::ingest::{self, DepthFrame, StampedPose};
use crate::mesh::UncertainMesh;
use crate::metrics::{compare, sample_mesh, write_metrics_csv, MetricsRow};
use crate::render::{self, Scene, Shape};
use crate::sampler::{curvature_thresholds, write_batch_csv, Sampler};
use crate::tracking::estimate_pose;

pub const GRID_FILE: &str = "grid.csdf";
pub const NETWORK_FILE: &str = "network.cnet";
pub const LOSS_FILE: &str = "loss.csv";
pub const MESH_FILE: &str = "mesh.ply";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Resolution of the marching-cubes mesh used as ground truth for analytic shapes.
const REFERENCE_RES: usize = 192;

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    version: &'a str,
    config: &'a PipelineConfig,
    seeds: Seeds,
    threads: usize,
    wall_time_s: f64,
    artifacts: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Seeds {
    training: u64,
    evaluation: u64,
    noise: u64,
}

/// Directory of one stage's artifacts, created on demand.
pub fn stage_dir(cfg: &PipelineConfig, stage: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(stage);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(cfg: &PipelineConfig, stage: &str, dir: &Path, started: Instant, artifacts: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        stage,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seeds: Seeds {
            training: cfg.training.seed,
            evaluation: cfg.evaluation.seed,
            noise: cfg.noise.seed,
        },
        threads: rayon::current_num_threads(),
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: artifacts
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn grid_center(cfg: &PipelineConfig) -> Vector3<f64> {
    Vector3::from(cfg.grid.center)
}

/// Bounds of the voxel cells, without allocating the grid.
pub fn grid_bounds(cfg: &PipelineConfig) -> (Vector3<f64>, Vector3<f64>) {
    let c = grid_center(cfg);
    let vs = cfg.grid.voxel_size;
    let d = cfg.grid.dims;
    let lo = Vector3::new(
        -((d[0] / 2) as f64) - 0.5,
        -((d[1] / 2) as f64) - 0.5,
        -((d[2] / 2) as f64) - 0.5,
    );
    let hi = Vector3::new(
        (d[0] - 1 - d[0] / 2) as f64 + 0.5,
        (d[1] - 1 - d[1] / 2) as f64 + 0.5,
        (d[2] - 1 - d[2] / 2) as f64 + 0.5,
    );
    (c + lo * vs, c + hi * vs)
}

pub fn extraction_bounds(cfg: &PipelineConfig) -> (Vector3<f64>, Vector3<f64>) {
    match cfg.extraction.bounds {
        Some([lo, hi]) => (Vector3::from(lo), Vector3::from(hi)),
        None => grid_bounds(cfg),
    }
}

/// Camera poses of a synthetic sequence.
pub fn synthetic_poses(src: &SyntheticSource, target: Vector3<f64>) -> Vec<Pose> {
    match src.layout {
        ViewLayout::Fibonacci => render::fibonacci_poses(target, src.distance, src.views),
        ViewLayout::Orbit => render::orbit_poses(target, src.distance, src.views, src.elevation_deg, 360.0),
        ViewLayout::Hemisphere => render::orbit_poses(target, src.distance, src.views, src.elevation_deg, 180.0),
    }
}

pub fn synthetic_intrinsics(src: &SyntheticSource) -> Result<Intrinsics> {
    Intrinsics::from_fov(src.width, src.height, src.fov_deg)
}

/// Input frames with the poses the fusion stage should use (after noise).
pub struct Frames {
    pub frames: Vec<DepthFrame>,
    /// Noise-free poses where they are known.
    pub ground_truth: Vec<Option<Pose>>,
}

pub fn acquire_frames(cfg: &PipelineConfig) -> Result<Frames> {
    let (mut frames, ground_truth) = match &cfg.source {
        SourceConfig::Synthetic(src) => {
            let k = synthetic_intrinsics(src)?;
            let poses = synthetic_poses(src, grid_center(cfg));
            let frames = poses
                .iter()
                .map(|p| render::render_depth(Scene::Analytic(&src.shape), p, &k))
                .collect::<Result<Vec<_>>>()?;
            (frames, poses.into_iter().map(Some).collect())
        }
        SourceConfig::Dataset(d) => {
            let intr = ingest::load_intrinsics(&d.intrinsics)?;
            let k = intr.intrinsics()?;
            let scale = d.depth_scale.unwrap_or(intr.depth_scale);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&d.depth_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                        Some("png" | "pgm")
                    )
                })
                .collect();
            files.sort();
            let stride = d.stride.unwrap_or(1);
            files = files.into_iter().step_by(stride).collect();
            if let Some(m) = d.max_frames {
                files.truncate(m);
            }
            if files.is_empty() {
                return Err(Error::config("source.dataset.depth_dir", "no depth images found"));
            }
            let trajectory = match &d.trajectory {
                Some(t) => Some(ingest::load_trajectory(t)?),
                None => None,
            };
            let mut frames = Vec::with_capacity(files.len());
            let mut truth = Vec::with_capacity(files.len());
            for (i, f) in files.iter().enumerate() {
                let pose = trajectory.as_ref().map(|t| associate(t, f, i)).transpose()?;
                let frame = ingest::load_depth_frame(f, scale, k)?.with_pose(pose.unwrap_or_else(Pose::identity));
                frames.push(frame);
                truth.push(pose);
            }
            (frames, truth)
        }
    };
    apply_noise(cfg, &mut frames);
    Ok(Frames { frames, ground_truth })
}

/// Pose of a depth image: by timestamp when the file stem is one, else by index.
fn associate(trajectory: &[StampedPose], file: &Path, index: usize) -> Result<Pose> {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    match stem.parse::<f64>() {
        Ok(ts) => {
            let best = trajectory
                .iter()
                .min_by(|a, b| (a.timestamp - ts).abs().total_cmp(&(b.timestamp - ts).abs()))
                .expect("trajectory is non-empty");
            if (best.timestamp - ts).abs() > 0.05 {
                return Err(Error::format(format!("no pose within 50 ms of depth image {}", file.display())));
            }
            Ok(best.pose)
        }
        Err(_) => trajectory
            .get(index)
            .map(|s| s.pose)
            .ok_or_else(|| Error::format(format!("trajectory has no pose for frame {index}"))),
    }
}

fn apply_noise(cfg: &PipelineConfig, frames: &mut [DepthFrame]) {
    let n = cfg.noise;
    if !n.is_active() {
        return;
    }
    log::info!(
        "noise: depth sigma {} m, pose rotation sigma {} deg, translation sigma {} m, seed {}",
        n.depth_sigma,
        n.pose_rotation_sigma_deg,
        n.pose_translation_sigma,
        n.seed
    );
    let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
    for f in frames.iter_mut() {
        if n.depth_sigma > 0.0 {
            let dist = Normal::new(0.0, n.depth_sigma).expect("finite sigma");
            for d in f.depths_mut() {
                if *d > 0.0 {
                    let v = *d + dist.sample(&mut rng);
                    *d = if v > 0.0 { v } else { 0.0 };
                }
            }
        }
        if n.pose_rotation_sigma_deg > 0.0 || n.pose_translation_sigma > 0.0 {
            let axis = loop {
                let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if a.norm() > 1e-3 && a.norm() <= 1.0 {
                    break Unit::new_normalize(a);
                }
            };
            let angle = if n.pose_rotation_sigma_deg > 0.0 {
                Normal::new(0.0, n.pose_rotation_sigma_deg.to_radians()).expect("finite").sample(&mut rng)
            } else {
                0.0
            };
            let t = if n.pose_translation_sigma > 0.0 {
                let d = Normal::new(0.0, n.pose_translation_sigma).expect("finite");
                Vector3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng))
            } else {
                Vector3::zeros()
            };
            let w = axis.into_inner() * angle;
            f.pose = f.pose.left_perturb(&Vector6::new(w.x, w.y, w.z, t.x, t.y, t.z));
        }
    }
}

pub fn new_grid(cfg: &PipelineConfig) -> Result<VoxelGrid> {
    VoxelGrid::new(grid_center(cfg), cfg.grid.dims, cfg.grid.voxel_size, cfg.grid.truncation)
}

/// Fuses all frames; with tracking enabled every frame after the first is
/// aligned to the grid built so far, starting from the previous estimate.
pub fn fuse_frames(cfg: &PipelineConfig, frames: &[DepthFrame], track: bool) -> Result<(VoxelGrid, Vec<Pose>)> {
    let mut grid = new_grid(cfg)?;
    let params = IntegrationParams {
        decay: cfg.grid.decay,
        association: cfg.grid.association,
    };
    let stencil = cfg.stencil();
    let mut poses = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let pose = if track && i > 0 {
            let init = poses[i - 1];
            let est = estimate_pose(&grid, frame, &init, &cfg.tracking.params)?;
            log::info!("frame {i}: tracked in {} iterations, cost {:.3e}", est.iterations, est.final_cost);
            est.pose
        } else {
            frame.pose
        };
        let posed = frame.clone().with_pose(pose);
        let geom = frame_geometry(&posed, &stencil);
        let t0 = Instant::now();
        grid.integrate(&posed, &geom, &params);
        log::debug!("frame {i}: integrated in {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
        poses.push(pose);
    }
    log::info!("fused {} frames, {} observed voxels", frames.len(), grid.observed_count());
    Ok((grid, poses))
}

fn save_poses(poses: &[Pose], path: &Path) -> Result<()> {
    let stamped: Vec<StampedPose> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| StampedPose {
            timestamp: i as f64,
            pose: *p,
        })
        .collect();
    ingest::save_trajectory(&stamped, path)
}

/// Writes the synthetic (or loaded) depth frames as 16-bit PNGs with a
/// trajectory and intrinsics, in a layout `source.dataset` can read back.
pub fn run_render(cfg: &PipelineConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = stage_dir(cfg, "render")?;
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&depth_dir)?;
    let frames = acquire_frames(cfg)?;
    let mut artifacts = Vec::new();
    for (i, f) in frames.frames.iter().enumerate() {
        let p = depth_dir.join(format!("{i:05}.png"));
        ingest::save_depth_png(f, ingest::TUM_DEPTH_SCALE, &p)?;
    }
    artifacts.push(depth_dir);
    let poses: Vec<Pose> = frames.frames.iter().map(|f| f.pose).collect();
    let traj = dir.join(TRAJECTORY_FILE);
    save_poses(&poses, &traj)?;
    artifacts.push(traj);
    let intr = dir.join("intrinsics.json");
    ingest::save_intrinsics(&frames.frames[0].intrinsics, ingest::TUM_DEPTH_SCALE, &intr)?;
    artifacts.push(intr);
    write_manifest(cfg, "render", &dir, started, &artifacts)?;
    Ok(dir)
}

fn run_fusion_stage(cfg: &PipelineConfig, stage: &str, track: bool) -> Result<VoxelGrid> {
    let started = Instant::now();
    let dir = stage_dir(cfg, stage)?;
    let frames = acquire_frames(cfg)?;
    let (grid, poses) = fuse_frames(cfg, &frames.frames, track)?;
    let grid_path = dir.join(GRID_FILE);
    grid.save(&grid_path)?;
    let points = dir.join("surface_points.ply");
    grid.extract_points(0.0).write_ply(&points)?;
    let traj = dir.join(TRAJECTORY_FILE);
    save_poses(&poses, &traj)?;
    let mut artifacts = vec![grid_path, points, traj];
    if track {
        let errors = dir.join("tracking_errors.csv");
        let mut csv = String::from("frame,rotation_deg,translation_m\n");
        for (i, (est, gt)) in poses.iter().zip(&frames.ground_truth).enumerate() {
            if let Some(gt) = gt {
                csv.push_str(&format!(
                    "{i},{:?},{:?}\n",
                    est.rotation_angle_to(gt).to_degrees(),
                    est.translation_distance_to(gt)
                ));
            }
        }
        std::fs::write(&errors, csv)?;
        artifacts.push(errors);
    }
    write_manifest(cfg, stage, &dir, started, &artifacts)?;
    Ok(grid)
}

pub fn run_fuse(cfg: &PipelineConfig) -> Result<VoxelGrid> {
    run_fusion_stage(cfg, "fuse", cfg.tracking.enabled)
}

pub fn run_track(cfg: &PipelineConfig) -> Result<VoxelGrid> {
    run_fusion_stage(cfg, "track", true)
}

pub fn load_grid(cfg: &PipelineConfig, path: Option<&Path>) -> Result<VoxelGrid> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("fuse").join(GRID_FILE));
    VoxelGrid::load(&p)
}

pub fn run_sample_dump(cfg: &PipelineConfig, grid: &VoxelGrid) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = stage_dir(cfg, "samples")?;
    let tc = cfg.train_config();
    let sc = tc.sampler;
    let thresholds = curvature_thresholds(grid, sc.q_lo, sc.q_hi, sc.threshold_method)?;
    let batch = Sampler::new(grid, thresholds, sc.interpolation()).batch(tc.per_stratum(), tc.unobserved(), sc.mode, tc.batch_seed(0))?;
    let path = dir.join("batch.csv");
    write_batch_csv(&batch, &path)?;
    write_manifest(cfg, "samples", &dir, started, std::slice::from_ref(&path))?;
    Ok(path)
}

pub fn run_train(cfg: &PipelineConfig, grid: &VoxelGrid) -> Result<NeuralField> {
    let started = Instant::now();
    let dir = stage_dir(cfg, "train")?;
    let t = &cfg.training;
    let mut net = init_network(t.layers, t.width, t.seed)?.fit_to_grid(grid)?;
    let outcome = train(&mut net, grid, &cfg.train_config())?;
    if let Some(last) = outcome.history.last() {
        log::info!(
            "trained {} epochs: total {:.5} l_x {:.5} l_n {:.5} l_w {:.5} l_e {:.5}",
            outcome.history.len(),
            last.total,
            last.l_x,
            last.l_n,
            last.l_w,
            last.l_e
        );
    }
    let net_path = dir.join(NETWORK_FILE);
    net.save(&net_path)?;
    let loss_path = dir.join(LOSS_FILE);
    write_loss_history(&outcome.history, &loss_path)?;
    write_manifest(cfg, "train", &dir, started, &[net_path, loss_path])?;
    Ok(net)
}

pub fn load_network(cfg: &PipelineConfig, path: Option<&Path>) -> Result<NeuralField> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("train").join(NETWORK_FILE));
    NeuralField::load(&p)
}

pub fn run_extract(cfg: &PipelineConfig, net: &NeuralField) -> Result<UncertainMesh> {
    let started = Instant::now();
    let dir = stage_dir(cfg, "extract")?;
    let (lo, hi) = extraction_bounds(cfg);
    let res = cfg.extraction.res;
    let field = evaluate_field(net, lo, hi, [res; 3])?;
    let mesh = marching_cubes_uncertain(&field, cfg.extraction.tau)?;
    log::info!(
        "extracted {} triangles, {} boundary edges",
        mesh.triangles.len(),
        mesh.boundary_edge_count()
    );
    let path = dir.join(MESH_FILE);
    mesh.write_ply_binary(&path)?;
    write_manifest(cfg, "extract", &dir, started, std::slice::from_ref(&path))?;
    Ok(mesh)
}

pub fn load_mesh(cfg: &PipelineConfig, path: Option<&Path>) -> Result<UncertainMesh> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("extract").join(MESH_FILE));
    UncertainMesh::load(&p)
}

/// Dense marching-cubes mesh of an analytic shape over the extraction bounds.
pub fn analytic_reference(shape: &Shape, lo: Vector3<f64>, hi: Vector3<f64>) -> Result<UncertainMesh> {
    let f = FnField(|p: &Vector3<f64>| (shape.sdf(p), 1.0));
    marching_cubes_uncertain(&evaluate_field(&f, lo, hi, [REFERENCE_RES; 3])?, 0.0)
}

pub fn reference_mesh(cfg: &PipelineConfig) -> Result<UncertainMesh> {
    match (&cfg.evaluation.reference, &cfg.source) {
        (Some(p), _) => UncertainMesh::load(p),
        (None, SourceConfig::Synthetic(s)) => {
            let (lo, hi) = extraction_bounds(cfg);
            analytic_reference(&s.shape, lo, hi)
        }
        (None, SourceConfig::Dataset(_)) => Err(Error::config(
            "evaluation.reference",
            "a reference mesh is required for dataset sources",
        )),
    }
}

pub fn run_eval(cfg: &PipelineConfig, mesh: &UncertainMesh) -> Result<MetricsRow> {
    let started = Instant::now();
    let dir = stage_dir(cfg, "eval")?;
    let reference = reference_mesh(cfg)?;
    let e = &cfg.evaluation;
    let a = sample_mesh(mesh, e.samples, e.seed)?;
    let b = sample_mesh(&reference, e.samples, e.seed.wrapping_add(1))?;
    let report = compare(&a, &b)?;
    let row = MetricsRow {
        dataset: e.dataset.clone(),
        method: e.method.clone(),
        resolution: cfg.grid.dims[0],
        cd: report.chamfer,
        hd: report.hausdorff,
        n: e.samples,
        seed: e.seed,
    };
    log::info!("chamfer {:.6} hausdorff {:.6}", row.cd, row.hd);
    let path = dir.join(METRICS_FILE);
    write_metrics_csv(std::slice::from_ref(&row), &path)?;
    write_manifest(cfg, "eval", &dir, started, std::slice::from_ref(&path))?;
    Ok(row)
}

/// Summary of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub grid: VoxelGrid,
    pub network: NeuralField,
    pub mesh: UncertainMesh,
    pub metrics: MetricsRow,
}

/// fuse → train → extract → eval.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let grid = run_fuse(cfg)?;
    let network = run_train(cfg, &grid)?;
    let mesh = run_extract(cfg, &network)?;
    let metrics = run_eval(cfg, &mesh)?;
    Ok(PipelineOutcome {
        grid,
        network,
        mesh,
        metrics,
    })
}

//! C interface to the curvsdf toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`CsdfStatus`]; on failure the message is kept per thread and
//! can be read with [`csdf_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use curvsdf::diffgeo::{frame_geometry, StencilParams};
use curvsdf::extract::extract_mesh;
use curvsdf::field::TrainConfig;
use curvsdf::metrics::{compare, sample_mesh};
use curvsdf::nalgebra::{Matrix3, Vector3};
use curvsdf::{DepthFrame, Error, IntegrationParams, Intrinsics, NeuralField, Pose, UncertainMesh, VoxelGrid};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    OutOfBounds = 5,
    NoObservedVoxels = 6,
    Numerical = 7,
    Config = 8,
    Panic = 9,
}

pub struct CsdfGrid(VoxelGrid);
pub struct CsdfField(NeuralField);
pub struct CsdfMesh(UncertainMesh);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> CsdfStatus {
    match err {
        Error::Io(_) => CsdfStatus::Io,
        Error::Format(_) => CsdfStatus::Format,
        Error::OutOfBounds(..) => CsdfStatus::OutOfBounds,
        Error::NoObservedVoxels => CsdfStatus::NoObservedVoxels,
        Error::Config { .. } => CsdfStatus::Config,
        Error::SingularSystem | Error::NonFinite(_) | Error::Diverged { .. } => CsdfStatus::Numerical,
        _ => CsdfStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> CsdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CsdfStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CsdfStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CsdfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    let slot = deref_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

fn points(xyz: &[f64]) -> Vec<Vector3<f64>> {
    xyz.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csdf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an empty grid of `dims` voxels of size `voxel_size` centered at `center`.
///
/// # Safety
/// `center` and `dims` must point to 3 elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_grid_new(
    center: *const f64,
    dims: *const usize,
    voxel_size: f64,
    truncation: u32,
    out: *mut *mut CsdfGrid,
) -> CsdfStatus {
    guard(|| {
        let c = slice(center, 3, "center")?;
        let d = slice(dims, 3, "dims")?;
        let grid = VoxelGrid::new(Vector3::new(c[0], c[1], c[2]), [d[0], d[1], d[2]], voxel_size, truncation)?;
        store(out, CsdfGrid(grid))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_grid_load(path_: *const c_char, out: *mut *mut CsdfGrid) -> CsdfStatus {
    guard(|| {
        let grid = VoxelGrid::load(path(path_)?)?;
        store(out, CsdfGrid(grid))
    })
}

/// # Safety
/// `grid` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csdf_grid_save(grid: *const CsdfGrid, path_: *const c_char) -> CsdfStatus {
    guard(|| {
        deref(grid, "grid")?.0.save(path(path_)?)?;
        Ok(())
    })
}

/// Fuses one depth frame.
///
/// `depth` holds `width * height` meters in row-major order (0 = invalid).
/// `intrinsics` is `[fx, fy, cx, cy]`. `pose` is the camera-to-world
/// transform as a row-major 3x4 matrix `[R | t]`.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn csdf_grid_integrate(
    grid: *mut CsdfGrid,
    depth: *const f64,
    width: usize,
    height: usize,
    intrinsics: *const f64,
    pose: *const f64,
) -> CsdfStatus {
    guard(|| {
        let g = deref_mut(grid, "grid")?;
        let d = slice(depth, width * height, "depth")?;
        let k = slice(intrinsics, 4, "intrinsics")?;
        let m = slice(pose, 12, "pose")?;
        let intr = Intrinsics::new(k[0], k[1], k[2], k[3], width, height)?;
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let pose = Pose::from_matrix(r, Vector3::new(m[3], m[7], m[11]))?;
        let frame = DepthFrame::from_depths(d.to_vec(), intr, pose)?;
        let geom = frame_geometry(&frame, &StencilParams::default());
        g.0.integrate(&frame, &geom, &IntegrationParams::default());
        Ok(())
    })
}

/// Number of voxels with nonzero accumulated weight.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csdf_grid_observed_count(grid: *const CsdfGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.observed_count())
}

/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csdf_grid_free(grid: *mut CsdfGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Creates a freshly initialized network normalized to the grid's bounds.
///
/// # Safety
/// `grid` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_field_new(
    grid: *const CsdfGrid,
    layers: usize,
    width: usize,
    seed: u64,
    out: *mut *mut CsdfField,
) -> CsdfStatus {
    guard(|| {
        let g = deref(grid, "grid")?;
        let net = curvsdf::init_network(layers, width, seed)?.fit_to_grid(&g.0)?;
        store(out, CsdfField(net))
    })
}

/// Trains the network on the grid with default settings apart from the
/// given epochs, batch size, learning rate and seed. Writes the final total
/// loss to `final_loss` when non-null.
///
/// # Safety
/// `field` and `grid` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn csdf_field_train(
    field: *mut CsdfField,
    grid: *const CsdfGrid,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    final_loss: *mut f64,
) -> CsdfStatus {
    guard(|| {
        let f = deref_mut(field, "field")?;
        let g = deref(grid, "grid")?;
        let cfg = TrainConfig {
            epochs,
            batch,
            lr,
            seed,
            ..TrainConfig::default()
        };
        let outcome = curvsdf::train(&mut f.0, &g.0, &cfg)?;
        if let (Some(slot), Some(last)) = (final_loss.as_mut(), outcome.history.last()) {
            *slot = last.total;
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_field_load(path_: *const c_char, out: *mut *mut CsdfField) -> CsdfStatus {
    guard(|| {
        let net = NeuralField::load(path(path_)?)?;
        store(out, CsdfField(net))
    })
}

/// # Safety
/// `field` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csdf_field_save(field: *const CsdfField, path_: *const c_char) -> CsdfStatus {
    guard(|| {
        deref(field, "field")?.0.save(path(path_)?)?;
        Ok(())
    })
}

/// Evaluates `n` points (`xyz`, 3n values) into `psi` and `w` (n values each).
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn csdf_field_evaluate(
    field: *const CsdfField,
    xyz: *const f64,
    n: usize,
    psi: *mut f64,
    w: *mut f64,
) -> CsdfStatus {
    guard(|| {
        let f = deref(field, "field")?;
        let pts = points(slice(xyz, 3 * n, "xyz")?);
        let psi = slice_mut(psi, n, "psi")?;
        let w = slice_mut(w, n, "w")?;
        for (i, (a, b)) in f.0.forward_batch(&pts)?.into_iter().enumerate() {
            psi[i] = a;
            w[i] = b;
        }
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csdf_field_free(field: *mut CsdfField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Extracts the uncertainty-masked zero level set over the box `lo`..`hi`
/// sampled at `res` lattice nodes per axis.
///
/// # Safety
/// `lo`, `hi`, `res` must point to 3 elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_extract(
    field: *const CsdfField,
    lo: *const f64,
    hi: *const f64,
    res: *const usize,
    tau: f64,
    out: *mut *mut CsdfMesh,
) -> CsdfStatus {
    guard(|| {
        let f = deref(field, "field")?;
        let lo = slice(lo, 3, "lo")?;
        let hi = slice(hi, 3, "hi")?;
        let r = slice(res, 3, "res")?;
        let mesh = extract_mesh(
            &f.0,
            Vector3::new(lo[0], lo[1], lo[2]),
            Vector3::new(hi[0], hi[1], hi[2]),
            [r[0], r[1], r[2]],
            tau,
        )?;
        store(out, CsdfMesh(mesh))
    })
}

/// Builds a mesh from `n_vertices` positions and `n_triangles` index triples.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_new(
    xyz: *const f64,
    n_vertices: usize,
    indices: *const u32,
    n_triangles: usize,
    out: *mut *mut CsdfMesh,
) -> CsdfStatus {
    guard(|| {
        let v = points(slice(xyz, 3 * n_vertices, "xyz")?);
        let t = slice(indices, 3 * n_triangles, "indices")?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        store(out, CsdfMesh(UncertainMesh::new(v, t)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_load(path_: *const c_char, out: *mut *mut CsdfMesh) -> CsdfStatus {
    guard(|| {
        let mesh = UncertainMesh::load(path(path_)?)?;
        store(out, CsdfMesh(mesh))
    })
}

/// Writes a binary PLY with per-vertex uncertainty.
///
/// # Safety
/// `mesh` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_save(mesh: *const CsdfMesh, path_: *const c_char) -> CsdfStatus {
    guard(|| {
        deref(mesh, "mesh")?.0.write_ply_binary(path(path_)?)?;
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_vertex_count(mesh: *const CsdfMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.vertices.len())
}

/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_triangle_count(mesh: *const CsdfMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.triangles.len())
}

/// Edges used by exactly one triangle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_boundary_edge_count(mesh: *const CsdfMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.boundary_edge_count())
}

/// Copies vertex positions (3 per vertex) and, when `uncertainty` is
/// non-null, per-vertex uncertainty. Buffers must hold the full mesh.
///
/// # Safety
/// `xyz` must hold `3 * vertex_count` values, `uncertainty` `vertex_count`.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_vertices(mesh: *const CsdfMesh, xyz: *mut f64, uncertainty: *mut f64) -> CsdfStatus {
    guard(|| {
        let m = &deref(mesh, "mesh")?.0;
        let out = slice_mut(xyz, 3 * m.vertices.len(), "xyz")?;
        for (dst, v) in out.chunks_exact_mut(3).zip(&m.vertices) {
            dst.copy_from_slice(v.as_slice());
        }
        if !uncertainty.is_null() {
            slice_mut(uncertainty, m.vertices.len(), "uncertainty")?.copy_from_slice(&m.uncertainty);
        }
        Ok(())
    })
}

/// Copies triangle indices (3 per triangle).
///
/// # Safety
/// `indices` must hold `3 * triangle_count` values.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_triangles(mesh: *const CsdfMesh, indices: *mut u32) -> CsdfStatus {
    guard(|| {
        let m = &deref(mesh, "mesh")?.0;
        let out = slice_mut(indices, 3 * m.triangles.len(), "indices")?;
        for (dst, t) in out.chunks_exact_mut(3).zip(&m.triangles) {
            dst.copy_from_slice(t);
        }
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_free(mesh: *mut CsdfMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Chamfer and Hausdorff distance between two meshes from `samples`
/// area-weighted surface points each.
///
/// # Safety
/// `a`, `b` must be live handles; `chamfer`, `hausdorff` writable.
#[no_mangle]
pub unsafe extern "C" fn csdf_mesh_distance(
    a: *const CsdfMesh,
    b: *const CsdfMesh,
    samples: usize,
    seed: u64,
    chamfer: *mut f64,
    hausdorff: *mut f64,
) -> CsdfStatus {
    guard(|| {
        let a = &deref(a, "a")?.0;
        let b = &deref(b, "b")?.0;
        let cd = deref_mut(chamfer, "chamfer")?;
        let hd = deref_mut(hausdorff, "hausdorff")?;
        let sa = sample_mesh(a, samples, seed)?;
        let sb = sample_mesh(b, samples, seed.wrapping_add(1))?;
        let report = compare(&sa, &sb)?;
        *cd = report.chamfer;
        *hd = report.hausdorff;
        Ok(())
    })
}

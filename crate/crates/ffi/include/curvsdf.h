#ifndef CURVSDF_H
#define CURVSDF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum CsdfStatus {
  CSDF_STATUS_OK = 0,
  CSDF_STATUS_NULL_POINTER = 1,
  CSDF_STATUS_INVALID_ARGUMENT = 2,
  CSDF_STATUS_IO = 3,
  CSDF_STATUS_FORMAT = 4,
  CSDF_STATUS_OUT_OF_BOUNDS = 5,
  CSDF_STATUS_NO_OBSERVED_VOXELS = 6,
  CSDF_STATUS_NUMERICAL = 7,
  CSDF_STATUS_CONFIG = 8,
  CSDF_STATUS_PANIC = 9,
} CsdfStatus;

typedef struct CsdfField CsdfField;

typedef struct CsdfGrid CsdfGrid;

typedef struct CsdfMesh CsdfMesh;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t csdf_last_error(char *buf, size_t len);

/**
 * Creates an empty grid of `dims` voxels of size `voxel_size` centered at `center`.
 *
 * # Safety
 * `center` and `dims` must point to 3 elements; `out` must be writable.
 */
enum CsdfStatus csdf_grid_new(const double *center,
                              const size_t *dims,
                              double voxel_size,
                              uint32_t truncation,
                              struct CsdfGrid **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CsdfStatus csdf_grid_load(const char *path_, struct CsdfGrid **out);

/**
 * # Safety
 * `grid` must be a live handle; `path` a NUL-terminated string.
 */
enum CsdfStatus csdf_grid_save(const struct CsdfGrid *grid, const char *path_);

/**
 * Fuses one depth frame.
 *
 * `depth` holds `width * height` meters in row-major order (0 = invalid).
 * `intrinsics` is `[fx, fy, cx, cy]`. `pose` is the camera-to-world
 * transform as a row-major 3x4 matrix `[R | t]`.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum CsdfStatus csdf_grid_integrate(struct CsdfGrid *grid,
                                    const double *depth,
                                    size_t width,
                                    size_t height,
                                    const double *intrinsics,
                                    const double *pose);

/**
 * Number of voxels with nonzero accumulated weight.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t csdf_grid_observed_count(const struct CsdfGrid *grid);

/**
 * # Safety
 * `grid` must be null or a handle not yet freed.
 */
void csdf_grid_free(struct CsdfGrid *grid);

/**
 * Creates a freshly initialized network normalized to the grid's bounds.
 *
 * # Safety
 * `grid` must be a live handle; `out` must be writable.
 */
enum CsdfStatus csdf_field_new(const struct CsdfGrid *grid,
                               size_t layers,
                               size_t width,
                               uint64_t seed,
                               struct CsdfField **out);

/**
 * Trains the network on the grid with default settings apart from the
 * given epochs, batch size, learning rate and seed. Writes the final total
 * loss to `final_loss` when non-null.
 *
 * # Safety
 * `field` and `grid` must be live handles.
 */
enum CsdfStatus csdf_field_train(struct CsdfField *field,
                                 const struct CsdfGrid *grid,
                                 size_t epochs,
                                 size_t batch,
                                 double lr,
                                 uint64_t seed,
                                 double *final_loss);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CsdfStatus csdf_field_load(const char *path_, struct CsdfField **out);

/**
 * # Safety
 * `field` must be a live handle; `path` a NUL-terminated string.
 */
enum CsdfStatus csdf_field_save(const struct CsdfField *field, const char *path_);

/**
 * Evaluates `n` points (`xyz`, 3n values) into `psi` and `w` (n values each).
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum CsdfStatus csdf_field_evaluate(const struct CsdfField *field,
                                    const double *xyz,
                                    size_t n,
                                    double *psi,
                                    double *w);

/**
 * # Safety
 * `field` must be null or a handle not yet freed.
 */
void csdf_field_free(struct CsdfField *field);

/**
 * Extracts the uncertainty-masked zero level set over the box `lo`..`hi`
 * sampled at `res` lattice nodes per axis.
 *
 * # Safety
 * `lo`, `hi`, `res` must point to 3 elements; `out` must be writable.
 */
enum CsdfStatus csdf_extract(const struct CsdfField *field,
                             const double *lo,
                             const double *hi,
                             const size_t *res,
                             double tau,
                             struct CsdfMesh **out);

/**
 * Builds a mesh from `n_vertices` positions and `n_triangles` index triples.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum CsdfStatus csdf_mesh_new(const double *xyz,
                              size_t n_vertices,
                              const uint32_t *indices,
                              size_t n_triangles,
                              struct CsdfMesh **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CsdfStatus csdf_mesh_load(const char *path_, struct CsdfMesh **out);

/**
 * Writes a binary PLY with per-vertex uncertainty.
 *
 * # Safety
 * `mesh` must be a live handle; `path` a NUL-terminated string.
 */
enum CsdfStatus csdf_mesh_save(const struct CsdfMesh *mesh, const char *path_);

/**
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t csdf_mesh_vertex_count(const struct CsdfMesh *mesh);

/**
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t csdf_mesh_triangle_count(const struct CsdfMesh *mesh);

/**
 * Edges used by exactly one triangle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t csdf_mesh_boundary_edge_count(const struct CsdfMesh *mesh);

/**
 * Copies vertex positions (3 per vertex) and, when `uncertainty` is
 * non-null, per-vertex uncertainty. Buffers must hold the full mesh.
 *
 * # Safety
 * `xyz` must hold `3 * vertex_count` values, `uncertainty` `vertex_count`.
 */
enum CsdfStatus csdf_mesh_vertices(const struct CsdfMesh *mesh, double *xyz, double *uncertainty);

/**
 * Copies triangle indices (3 per triangle).
 *
 * # Safety
 * `indices` must hold `3 * triangle_count` values.
 */
enum CsdfStatus csdf_mesh_triangles(const struct CsdfMesh *mesh, uint32_t *indices);

/**
 * # Safety
 * `mesh` must be null or a handle not yet freed.
 */
void csdf_mesh_free(struct CsdfMesh *mesh);

/**
 * Chamfer and Hausdorff distance between two meshes from `samples`
 * area-weighted surface points each.
 *
 * # Safety
 * `a`, `b` must be live handles; `chamfer`, `hausdorff` writable.
 */
enum CsdfStatus csdf_mesh_distance(const struct CsdfMesh *a,
                                   const struct CsdfMesh *b,
                                   size_t samples,
                                   uint64_t seed,
                                   double *chamfer,
                                   double *hausdorff);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CURVSDF_H */

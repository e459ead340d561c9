#ifndef SWITCHPIDE_H
#define SWITCHPIDE_H

/* Generated by cbindgen from the switchpide-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call. Values match the CLI exit codes: `2` means a data
// assumption failed (the error message names the tag), `64` means the
// input itself was unusable.
typedef enum SpideStatus {
  SPIDE_STATUS_OK = 0,
  SPIDE_STATUS_RUNTIME = 1,
  SPIDE_STATUS_VALIDATION = 2,
  SPIDE_STATUS_NULL_ARGUMENT = 3,
  SPIDE_STATUS_USAGE = 64,
} SpideStatus;

// Solver output (opaque): value surfaces, residuals, and binding modes on
// a space-time grid.
typedef struct SpideSolution SpideSolution;

// Parsed problem description (opaque).
typedef struct SpideSpec SpideSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *spide_version(void);

// Message for the last failure on the calling thread.
//
// The pointer stays valid until this thread's next call into the library.
// Returns an empty string if nothing failed yet.
const char *spide_last_error(void);

// Parse a JSON problem description into a new handle.
//
// On `Ok`, `*out` owns the spec and must be released with
// [`spide_spec_free`].
//
// # Safety
// `json` must point to a NUL-terminated string and `out` to writable
// pointer storage.
enum SpideStatus spide_spec_parse(const char *json, struct SpideSpec **out);

// Release a spec handle; null is ignored.
//
// # Safety
// `spec` must be null or a pointer from [`spide_spec_parse`] not yet freed.
void spide_spec_free(struct SpideSpec *spec);

// State dimension, mode count, and horizon of a parsed spec.
//
// # Safety
// `spec` must be a live spec handle; out-pointers may be null to skip a
// field.
enum SpideStatus spide_spec_dims(const struct SpideSpec *spec, size_t *n, size_t *m, double *t_end);

// Check the data assumptions on `samples` quasi-random points; returns
// `Validation` (message names the failing tag) if any group fails.
//
// # Safety
// `spec` must be a live spec handle.
enum SpideStatus spide_validate(const struct SpideSpec *spec, size_t samples);

// Solve on a uniform grid with `nx` nodes per axis and `nt` time levels.
//
// `theta` sets the implicitness of the diffusion stage (use 1 for fully
// implicit); `obstacle_tol <= 0` keeps the default. On `Ok`, `*out` owns
// the solution and must be released with [`spide_solution_free`].
//
// # Safety
// `spec` must be a live spec handle and `out` writable pointer storage.
enum SpideStatus spide_solve(const struct SpideSpec *spec,
                             size_t nx,
                             size_t nt,
                             double theta,
                             double obstacle_tol,
                             struct SpideSolution **out);

// Release a solution handle; null is ignored.
//
// # Safety
// `sol` must be null or a pointer from [`spide_solve`] not yet freed.
void spide_solution_free(struct SpideSolution *sol);

// Mode count, time levels, and spatial nodes of a solution.
//
// # Safety
// `sol` must be a live solution handle; out-pointers may be null.
enum SpideStatus spide_solution_dims(const struct SpideSolution *sol,
                                     size_t *m,
                                     size_t *nt,
                                     size_t *nodes);

// Coordinate of grid node `node` along `axis`.
//
// # Safety
// `sol` must be a live solution handle and `out` writable.
enum SpideStatus spide_solution_coord(const struct SpideSolution *sol,
                                      size_t node,
                                      size_t axis,
                                      double *out);

// Copy one time slice of the value surface for `mode` into `buf`
// (`len >= nodes` required), ordered by flat node index.
//
// # Safety
// `sol` must be a live solution handle and `buf` writable for `len`
// doubles.
enum SpideStatus spide_solution_values(const struct SpideSolution *sol,
                                       size_t mode,
                                       size_t level,
                                       double *buf,
                                       size_t len);

// Single value lookup: `u_mode(x_node, t_level)`.
//
// # Safety
// `sol` must be a live solution handle and `out` writable.
enum SpideStatus spide_solution_value(const struct SpideSolution *sol,
                                      size_t mode,
                                      size_t level,
                                      size_t node,
                                      double *out);

// Complementarity residual `min(equation residual, u - obstacle)` at one
// space-time index (zero on the boundary and at the terminal level).
//
// # Safety
// `sol` must be a live solution handle and `out` writable.
enum SpideStatus spide_solution_residual(const struct SpideSolution *sol,
                                         size_t mode,
                                         size_t level,
                                         size_t node,
                                         double *out);

// Mode whose switch target binds at this index, or `-1` when the value
// sits strictly above the switching obstacle.
//
// # Safety
// `sol` must be a live solution handle and `out` writable.
enum SpideStatus spide_solution_binding(const struct SpideSolution *sol,
                                        size_t mode,
                                        size_t level,
                                        size_t node,
                                        int *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWITCHPIDE_H */

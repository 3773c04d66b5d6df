#ifndef DSPIB_H
#define DSPIB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DspibStatus {
  DSPIB_STATUS_OK = 0,
  DSPIB_STATUS_NULL_POINTER = 1,
  DSPIB_STATUS_INVALID_ARGUMENT = 2,
  DSPIB_STATUS_BUFFER_TOO_SMALL = 3,
  DSPIB_STATUS_IO = 4,
  DSPIB_STATUS_FORMAT = 5,
  DSPIB_STATUS_NUMERICAL = 6,
  DSPIB_STATUS_TRAINING = 7,
  DSPIB_STATUS_PANIC = 8,
} DspibStatus;

typedef enum DspibSystem {
  DSPIB_SYSTEM_THREE_HOLE = 0,
  DSPIB_SYSTEM_LJ7 = 1,
} DspibSystem;

/**
 * Opaque trained model bundle.
 */
typedef struct DspibBundle DspibBundle;

/**
 * Opaque recorded trajectory.
 */
typedef struct DspibTrajectory DspibTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on this thread.
 */
const char *dspib_last_error(void);

/**
 * Number of coordinates of a configuration of `system`.
 */
size_t dspib_system_dim(enum DspibSystem system);

/**
 * Potential energy of one configuration with the default parameters.
 *
 * # Safety
 * `coords` must point to `len` doubles and `energy` to one writable double.
 */
enum DspibStatus dspib_potential_energy(enum DspibSystem system,
                                        const double *coords,
                                        size_t len,
                                        double *energy);

/**
 * Gradient of the potential; `grad` must hold `len` doubles.
 *
 * # Safety
 * `coords` must point to `len` doubles and `grad` to `len` writable doubles.
 */
enum DspibStatus dspib_potential_gradient(enum DspibSystem system,
                                          const double *coords,
                                          size_t len,
                                          double *grad);

/**
 * Run Langevin dynamics with the system's default settings except for the
 * given temperature, length, stride and seed.
 *
 * # Safety
 * `out` must point to writable storage for one handle pointer.
 */
enum DspibStatus dspib_simulate(enum DspibSystem system,
                                double temperature,
                                uint64_t n_steps,
                                uint64_t record_stride,
                                uint64_t seed,
                                struct DspibTrajectory **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum DspibStatus dspib_trajectory_load(const char *path_, struct DspibTrajectory **out);

/**
 * # Safety
 * `traj` must be a live handle and `path` a NUL-terminated string.
 */
enum DspibStatus dspib_trajectory_save(const struct DspibTrajectory *traj, const char *path_);

/**
 * Number of recorded frames, or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t dspib_trajectory_frames(const struct DspibTrajectory *traj);

/**
 * Coordinates per frame, or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t dspib_trajectory_dim(const struct DspibTrajectory *traj);

/**
 * Copy frames (row-major, frames x dim) into `out`.
 *
 * # Safety
 * `traj` must be a live handle and `out` must point to `len` writable floats.
 */
enum DspibStatus dspib_trajectory_copy(const struct DspibTrajectory *traj, float *out, size_t len);

/**
 * # Safety
 * `traj` must be null or a handle not yet freed.
 */
void dspib_trajectory_free(struct DspibTrajectory *traj);

/**
 * Load a model bundle from its JSON manifest path.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum DspibStatus dspib_bundle_load(const char *path_, struct DspibBundle **out);

/**
 * Latent dimension, or 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t dspib_bundle_latent_dim(const struct DspibBundle *bundle);

/**
 * Number of active metastable states, or 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t dspib_bundle_num_states(const struct DspibBundle *bundle);

/**
 * Deterministic encoder means of every frame (frames x latent_dim).
 *
 * # Safety
 * Handles must be live and `out` must point to `len` writable doubles.
 */
enum DspibStatus dspib_bundle_encode(const struct DspibBundle *bundle,
                                     const struct DspibTrajectory *traj,
                                     double *out,
                                     size_t len);

/**
 * Draw `count` latents from the learned prior (count x latent_dim).
 * Pass NaN as `temperature` to use the bundle's own default.
 *
 * # Safety
 * `bundle` must be live and `out` must point to `len` writable doubles.
 */
enum DspibStatus dspib_bundle_sample(const struct DspibBundle *bundle,
                                     size_t count,
                                     double temperature,
                                     uint64_t seed,
                                     double *out,
                                     size_t len);

/**
 * # Safety
 * `bundle` must be null or a handle not yet freed.
 */
void dspib_bundle_free(struct DspibBundle *bundle);

/**
 * Symmetrized KL divergence between histograms of two point sets
 * (row-major, `dim` columns), binned on `bins` per axis over their padded
 * common bounding box.
 *
 * # Safety
 * `p` and `q` must point to `n_p * dim` and `n_q * dim` doubles.
 */
enum DspibStatus dspib_symmetrized_kl(const double *p,
                                      size_t n_p,
                                      const double *q,
                                      size_t n_q,
                                      size_t dim,
                                      size_t bins,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSPIB_H */

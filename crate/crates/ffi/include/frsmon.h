#ifndef FRSMON_H
#define FRSMON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code for every fallible call.
 */
typedef enum FrsmonStatus {
  FrsmonStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  FrsmonStatus_NullPointer = 1,
  /**
   * An argument was out of range or structurally invalid.
   */
  FrsmonStatus_InvalidArgument = 2,
  /**
   * The level solver rejected the problem.
   */
  FrsmonStatus_SolveFailed = 3,
  /**
   * The calibration model was missing a step or failed to load.
   */
  FrsmonStatus_CalibrationFailed = 4,
  /**
   * A path was not valid UTF-8 or a file operation failed.
   */
  FrsmonStatus_IoFailed = 5,
} FrsmonStatus;

/**
 * Opaque trust belief over the predictor.
 */
typedef struct FrsmonBelief FrsmonBelief;

/**
 * Opaque reachable set built from a mixture and its levels.
 */
typedef struct FrsmonFrs FrsmonFrs;

/**
 * Opaque Gaussian-mixture prediction for one horizon step.
 */
typedef struct FrsmonGmm FrsmonGmm;

/**
 * Opaque solved level set (one level per mode).
 */
typedef struct FrsmonLevels FrsmonLevels;

/**
 * Opaque per-step calibration model.
 */
typedef struct FrsmonModel FrsmonModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *frsmon_last_error(void);

/**
 * Builds a mixture from packed arrays:
 * `means` is `k * 2` doubles (x, y per mode), `covs` is `k * 4` doubles
 * (row-major 2x2 per mode), `weights` is `k` doubles summing to 1.
 * `horizon_step` is the 1-based prediction step the mixture belongs to.
 *
 * # Safety
 * The array pointers must reference buffers of the stated lengths.
 */
enum FrsmonStatus frsmon_gmm_new(const double *means,
                                 const double *covs,
                                 const double *weights,
                                 uintptr_t k,
                                 uintptr_t horizon_step,
                                 struct FrsmonGmm **out);

/**
 * # Safety
 * `handle` must come from `frsmon_gmm_new` and not have been freed.
 */
void frsmon_gmm_free(struct FrsmonGmm *handle);

/**
 * Solves for the per-mode squared-Mahalanobis levels covering mass `tau`.
 *
 * # Safety
 * `handle` must be a live mixture handle.
 */
enum FrsmonStatus frsmon_solve_levels(const struct FrsmonGmm *handle,
                                      double tau,
                                      struct FrsmonLevels **out);

/**
 * Number of levels in a solution.
 *
 * # Safety
 * `handle` must be a live levels handle.
 */
uintptr_t frsmon_levels_len(const struct FrsmonLevels *handle);

/**
 * Copies the levels into `out` (capacity `len`) and reports the objective
 * (total ellipse area) and achieved probability mass. Any of the output
 * pointers may be null to skip that field.
 *
 * # Safety
 * `handle` must be live; `out` must have capacity for `len` doubles.
 */
enum FrsmonStatus frsmon_levels_get(const struct FrsmonLevels *handle,
                                    double *out,
                                    uintptr_t len,
                                    double *objective,
                                    double *achieved_mass);

/**
 * # Safety
 * `handle` must come from `frsmon_solve_levels` and not have been freed.
 */
void frsmon_levels_free(struct FrsmonLevels *handle);

/**
 * Builds the reachable set at a given scale (1.0 = uncalibrated; pass the
 * calibrated eta for the step to get the conformalized set).
 *
 * # Safety
 * Both handles must be live and refer to the same mixture.
 */
enum FrsmonStatus frsmon_build_frs(const struct FrsmonGmm *handle,
                                   const struct FrsmonLevels *levels,
                                   double scale,
                                   struct FrsmonFrs **out);

/**
 * Point-membership test. Writes 1 into `out` when (x, y) is inside.
 *
 * # Safety
 * `handle` must be a live set handle.
 */
enum FrsmonStatus frsmon_frs_contains(const struct FrsmonFrs *handle,
                                      double x,
                                      double y,
                                      int32_t *out);

/**
 * # Safety
 * `handle` must come from `frsmon_build_frs` and not have been freed.
 */
void frsmon_frs_free(struct FrsmonFrs *handle);

/**
 * Nonconformity score of a ground-truth point against a solved mixture:
 * the minimum over modes of squared Mahalanobis distance divided by the
 * mode's level.
 *
 * # Safety
 * Both handles must be live and refer to the same mixture.
 */
enum FrsmonStatus frsmon_nonconformity(const struct FrsmonGmm *handle,
                                       const struct FrsmonLevels *levels,
                                       double x,
                                       double y,
                                       double *out);

/**
 * Loads a calibration model from a JSON file produced by the CLI.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
enum FrsmonStatus frsmon_model_load(const char *path, struct FrsmonModel **out);

/**
 * Calibrated scale for a 1-based horizon step.
 *
 * # Safety
 * `handle` must be a live model handle.
 */
enum FrsmonStatus frsmon_model_eta(const struct FrsmonModel *handle, uintptr_t step, double *out);

/**
 * # Safety
 * `handle` must come from `frsmon_model_load` and not have been freed.
 */
void frsmon_model_free(struct FrsmonModel *handle);

/**
 * Creates a two-point trust belief over covariance scales
 * `beta_low < beta_high`, starting uniform.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FrsmonStatus frsmon_belief_new(double beta_low, double beta_high, struct FrsmonBelief **out);

/**
 * Updates the belief in place with an observed position against the one-step
 * forecast it was predicted by, at calibrated scale `eta`.
 *
 * # Safety
 * Both handles must be live.
 */
enum FrsmonStatus frsmon_belief_update(struct FrsmonBelief *handle,
                                       double x,
                                       double y,
                                       const struct FrsmonGmm *prediction,
                                       double eta);

/**
 * Posterior mean of the trust scale; below the fallback threshold the
 * caller should switch to a conservative reachable set.
 *
 * # Safety
 * `handle` must be a live belief handle.
 */
enum FrsmonStatus frsmon_belief_beta_hat(const struct FrsmonBelief *handle, double *out);

/**
 * # Safety
 * `handle` must come from `frsmon_belief_new` and not have been freed.
 */
void frsmon_belief_free(struct FrsmonBelief *handle);

/**
 * Membership test against the kinematic worst-case disc for an agent at
 * (x0, y0) with the given heading and speed, after `t` seconds, under
 * acceleration bound `a_max` and speed cap `v_max`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FrsmonStatus frsmon_worst_case_contains(double x0,
                                             double y0,
                                             double heading,
                                             double speed,
                                             double t,
                                             double a_max,
                                             double v_max,
                                             double qx,
                                             double qy,
                                             int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRSMON_H */

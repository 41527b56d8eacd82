#ifndef CRPCL_H
#define CRPCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CrpclStatus {
  CRPCL_STATUS_OK = 0,
  CRPCL_STATUS_NULL_POINTER = 1,
  /**
   * Malformed argument: non-UTF-8 text, non-finite number, bad length.
   */
  CRPCL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Rejected configuration or infeasible stream spec.
   */
  CRPCL_STATUS_CONFIG = 3,
  /**
   * Malformed or mismatched input data.
   */
  CRPCL_STATUS_DATA = 4,
  /**
   * The requested metric is undefined for the input (e.g. forgetting
   * with fewer than two tasks).
   */
  CRPCL_STATUS_UNDEFINED = 5,
  CRPCL_STATUS_INTERNAL = 6,
  /**
   * A panic was caught at the boundary.
   */
  CRPCL_STATUS_PANIC = 7,
} CrpclStatus;

/**
 * Opaque online clustering engine.
 */
typedef struct CrpclEngine CrpclEngine;

/**
 * Outcome of one assignment.
 */
typedef struct CrpclAssignment {
  size_t cluster_id;
  /**
   * True when the task opened a new cluster.
   */
  bool created;
  /**
   * Log posterior of the chosen option (unnormalized).
   */
  double log_posterior;
  /**
   * True when the Gaussian likelihood ratio was used, false during cold
   * start.
   */
  bool gaussian_mode;
} CrpclAssignment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next crpcl call on the same thread.
 */
const char *crpcl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *crpcl_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void crpcl_string_free(char *s);

/**
 * Creates an empty engine with concentration `alpha`, similarity floor
 * `sigma_min` and logit guard `epsilon`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CrpclStatus crpcl_engine_new(double alpha,
                                  double sigma_min,
                                  double epsilon,
                                  struct CrpclEngine **out);

/**
 * Destroys an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from this library and not have been freed already.
 */
void crpcl_engine_free(struct CrpclEngine *engine);

/**
 * Routes one task embedding of length `dim` and updates the engine.
 *
 * # Safety
 * `engine` must be a live handle, `task_id` a NUL-terminated string,
 * `vector` must point to `dim` doubles and `out` may be null or writable.
 */
enum CrpclStatus crpcl_engine_assign(struct CrpclEngine *engine,
                                     const char *task_id,
                                     const double *vector,
                                     size_t dim,
                                     struct CrpclAssignment *out);

/**
 * Number of clusters discovered so far.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum CrpclStatus crpcl_engine_discovered_k(const struct CrpclEngine *engine, size_t *out);

/**
 * Cluster label of every task in arrival order. Writes at most `capacity`
 * labels into `labels` and the total count into `out_len`; call with
 * `capacity = 0` to query the length.
 *
 * # Safety
 * `engine` must be a live handle, `labels` must hold `capacity` entries
 * (or be null when `capacity` is 0) and `out_len` must be writable.
 */
enum CrpclStatus crpcl_engine_labels(const struct CrpclEngine *engine,
                                     size_t *labels,
                                     size_t capacity,
                                     size_t *out_len);

/**
 * Serializes the engine as JSON into a new string.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum CrpclStatus crpcl_engine_to_json(const struct CrpclEngine *engine, char **out);

/**
 * Restores an engine from [`crpcl_engine_to_json`] output.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` writable.
 */
enum CrpclStatus crpcl_engine_from_json(const char *json, struct CrpclEngine **out);

/**
 * Hard Dice between two binary masks of length `len`; two empty masks
 * score 1.
 *
 * # Safety
 * `pred` and `truth` must each point to `len` bytes.
 */
enum CrpclStatus crpcl_dice_score(const uint8_t *pred,
                                  const uint8_t *truth,
                                  size_t len,
                                  double *out);

/**
 * Mean `peak − final` over the first `len − 1` tasks. Returns
 * [`CrpclStatus::Undefined`] when `len < 2`.
 *
 * # Safety
 * `peaks` and `finals` must each point to `len` doubles.
 */
enum CrpclStatus crpcl_forgetting_rate(const double *peaks,
                                       const double *finals,
                                       size_t len,
                                       double *out);

/**
 * `2·exp(−Δ²/(8(σ_intra² + σ_inter²)))`.
 */
double crpcl_chernoff_bound(double delta, double sigma_intra, double sigma_inter);

/**
 * Runs the continual learner on the synthetic toy stream described by a
 * TOML run configuration (empty string for defaults) and returns the run
 * summary as JSON.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` writable.
 */
enum CrpclStatus crpcl_train_synthetic(const char *config_toml, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRPCL_H */

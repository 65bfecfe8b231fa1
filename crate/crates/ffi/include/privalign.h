#ifndef PRIVALIGN_H
#define PRIVALIGN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum PaStatus {
  PA_STATUS_OK = 0,
  PA_STATUS_NULL_POINTER = 1,
  PA_STATUS_INVALID_ARGUMENT = 2,
  PA_STATUS_DOMAIN_ERROR = 3,
  PA_STATUS_NO_CONVERGENCE = 4,
  PA_STATUS_EMPTY_CLASS = 5,
  PA_STATUS_CONFIG_ERROR = 6,
  PA_STATUS_IO_ERROR = 7,
  PA_STATUS_PANIC = 8,
} PaStatus;

typedef enum PaRegularizer {
  PA_REGULARIZER_KL = 0,
  PA_REGULARIZER_CHI_MIX = 1,
} PaRegularizer;

typedef enum PaOrdering {
  PA_ORDERING_CLEAN = 0,
  PA_ORDERING_PRIVACY_ONLY = 1,
  PA_ORDERING_CORRUPTION_ONLY = 2,
  PA_ORDERING_CTL = 3,
  PA_ORDERING_LTC = 4,
} PaOrdering;

typedef enum PaAdversary {
  PA_ADVERSARY_ALWAYS_FLIP = 0,
  PA_ADVERSARY_CONSTANT_PLUS = 1,
  PA_ADVERSARY_CONSTANT_MINUS = 2,
} PaAdversary;

typedef enum PaOfflineSolver {
  PA_OFFLINE_SOLVER_PRIV_CHIPO = 0,
  PA_OFFLINE_SOLVER_SQUARE_CHIPO = 1,
} PaOfflineSolver;

/**
 * Opaque preference dataset handle.
 */
typedef struct PaDataset PaDataset;

/**
 * Opaque environment handle.
 */
typedef struct PaEnvironment PaEnvironment;

/**
 * Opaque policy class handle.
 */
typedef struct PaPolicyClass PaPolicyClass;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len` bytes, into `buf`. Returns the full message length
 * (excluding the terminator). `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t pa_last_error_message(char *buf, size_t len);

/**
 * Keep probability of randomized response. Pass `INFINITY` for no privacy.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum PaStatus pa_sigma_eps(double epsilon, double *out);

/**
 * Privacy inflation factor.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum PaStatus pa_c_eps(double epsilon, double *out);

/**
 * Parses an environment from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum PaStatus pa_environment_from_json(const char *json, struct PaEnvironment **out);

/**
 * Draws a random instance: uniform rewards on `[0, r_max]`, Dirichlet(2)
 * reference rows floored at 1e-3, uniform prompt distribution.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum PaStatus pa_environment_generate(size_t prompts,
                                      size_t responses,
                                      double r_max,
                                      uint64_t seed,
                                      struct PaEnvironment **out);

/**
 * # Safety
 * `env` must be null or a handle from this library, not yet freed.
 */
void pa_environment_free(struct PaEnvironment *env);

/**
 * # Safety
 * `env` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_environment_num_prompts(const struct PaEnvironment *env, size_t *out);

/**
 * Total number of (prompt, response) cells, the length of a flattened
 * policy.
 *
 * # Safety
 * `env` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_environment_num_cells(const struct PaEnvironment *env, size_t *out);

/**
 * Writes the regularized optimal policy, prompt-major, into `probs`
 * (`len` must equal the cell count).
 *
 * # Safety
 * `env` must be a live handle; `probs` must be valid for `len` writes.
 */
enum PaStatus pa_environment_optimal_policy(const struct PaEnvironment *env,
                                            double beta,
                                            enum PaRegularizer reg,
                                            double *probs,
                                            size_t len);

/**
 * Builds a realizable class of `size` members around the optimum.
 *
 * # Safety
 * `env` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_policy_class_build(const struct PaEnvironment *env,
                                    double beta,
                                    size_t size,
                                    enum PaRegularizer reg,
                                    uint64_t seed,
                                    struct PaPolicyClass **out);

/**
 * # Safety
 * `class` must be null or a live handle.
 */
void pa_policy_class_free(struct PaPolicyClass *class_);

/**
 * # Safety
 * `class` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_policy_class_len(const struct PaPolicyClass *class_, size_t *out);

/**
 * Index of the planted optimum.
 *
 * # Safety
 * `class` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_policy_class_optimal_index(const struct PaPolicyClass *class_, size_t *out);

/**
 * Unregularized value J of a member.
 *
 * # Safety
 * Handles must be live; `out` must be valid for writes.
 */
enum PaStatus pa_policy_class_value(const struct PaEnvironment *env,
                                    const struct PaPolicyClass *class_,
                                    size_t index,
                                    double *out);

/**
 * Offline preference data through the given channel. Pass `INFINITY` as
 * `epsilon` for no privatization.
 *
 * # Safety
 * `env` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_dataset_generate(const struct PaEnvironment *env,
                                  size_t n,
                                  double epsilon,
                                  double alpha,
                                  enum PaOrdering ordering,
                                  enum PaAdversary adversary,
                                  uint64_t seed,
                                  struct PaDataset **out);

/**
 * # Safety
 * `data` must be null or a live handle.
 */
void pa_dataset_free(struct PaDataset *data);

/**
 * # Safety
 * `data` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_dataset_len(const struct PaDataset *data, size_t *out);

/**
 * Fraction of observed labels that differ from the clean ones.
 *
 * # Safety
 * `data` must be a live handle; `out` must be valid for writes.
 */
enum PaStatus pa_dataset_flip_rate(const struct PaDataset *data, double *out);

/**
 * Runs an offline solver and reports the chosen member.
 *
 * # Safety
 * Handles must be live; `out_index` must be valid for writes.
 */
enum PaStatus pa_solve_offline(const struct PaEnvironment *env,
                               const struct PaPolicyClass *class_,
                               const struct PaDataset *data,
                               enum PaOfflineSolver solver,
                               double beta,
                               size_t *out_index);

/**
 * Runs a full sweep from a JSON config and writes its outputs to
 * `out_dir`. `out_records` receives the number of runs.
 *
 * # Safety
 * Strings must be NUL-terminated; `out_records` may be null.
 */
enum PaStatus pa_run_sweep_json(const char *config_json, const char *out_dir, size_t *out_records);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIVALIGN_H */

#ifndef COSTATE_H
#define COSTATE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_SHAPE = 3,
  CS_STATUS_NON_FINITE = 4,
  CS_STATUS_IO = 5,
  CS_STATUS_CHECKPOINT = 6,
  CS_STATUS_CONFIG = 7,
  CS_STATUS_PANIC = 8,
} CsStatus;

typedef enum CsActivation {
  CS_ACTIVATION_RELU = 0,
  CS_ACTIVATION_TANH = 1,
  CS_ACTIVATION_LINEAR = 2,
} CsActivation;

/**
 * A generated task plus the noise stream used by [`cs_env_step`].
 */
typedef struct CsEnv CsEnv;

/**
 * A feed-forward network.
 */
typedef struct CsMlp CsMlp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call on the same thread.
 */
const char *cs_last_error(void);

/**
 * Parameter count of a relu network with the given layer sizes.
 * Returns 0 when the sizes are invalid.
 *
 * # Safety
 * `sizes` must point to `n_layers` values.
 */
size_t cs_param_count(const size_t *sizes, size_t n_layers);

/**
 * Generates a linear task. `seed` drives both the task and the noise stream.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum CsStatus cs_env_new(size_t n_s,
                         size_t n_c,
                         size_t n_cost,
                         double noise_sigma,
                         uint64_t seed,
                         struct CsEnv **out);

/**
 * # Safety
 * `env` must come from [`cs_env_new`] and not be used afterwards.
 */
void cs_env_free(struct CsEnv *env);

/**
 * # Safety
 * All pointers must be valid.
 */
enum CsStatus cs_env_dims(const struct CsEnv *env, size_t *n_s, size_t *n_a);

/**
 * Advances `n` states by one Euler step. Buffers hold `n·n_s` states,
 * `n·n_a` actions and `n·n_s` outputs.
 *
 * # Safety
 * Buffers must have the sizes above.
 */
enum CsStatus cs_env_step(struct CsEnv *env,
                          const double *states,
                          const double *actions,
                          size_t n,
                          double *out);

/**
 * Cost rate c(s) of `n` states, one value per state.
 *
 * # Safety
 * `states` holds `n·n_s` values and `out` has room for `n`.
 */
enum CsStatus cs_env_cost_rate(const struct CsEnv *env,
                               const double *states,
                               size_t n,
                               double *out);

/**
 * Glorot-initialized network with relu hidden layers.
 *
 * # Safety
 * `sizes` holds `n_layers` values and `out` is writable.
 */
enum CsStatus cs_mlp_new(const size_t *sizes,
                         size_t n_layers,
                         enum CsActivation output,
                         uint64_t seed,
                         struct CsMlp **out);

/**
 * Loads a network checkpoint, or the policy inside a policy checkpoint.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
enum CsStatus cs_mlp_load(const char *path, struct CsMlp **out);

/**
 * # Safety
 * `net` is a valid handle and `path` a NUL-terminated string.
 */
enum CsStatus cs_mlp_save(const struct CsMlp *net, const char *path);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void cs_mlp_free(struct CsMlp *net);

/**
 * # Safety
 * All pointers must be valid.
 */
enum CsStatus cs_mlp_dims(const struct CsMlp *net, size_t *input, size_t *output, size_t *params);

/**
 * Evaluates `n` inputs. `out` receives `n·output_dim` values.
 *
 * # Safety
 * Buffers must match the network dimensions.
 */
enum CsStatus cs_mlp_forward(const struct CsMlp *net, const double *x, size_t n, double *out);

/**
 * Runs the block described by a TOML config and writes its outputs to
 * `out_dir`, or to the config's own output directory when `out_dir` is null.
 *
 * # Safety
 * `config_path` is a NUL-terminated string; `out_dir` is null or one.
 */
enum CsStatus cs_run_block(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSTATE_H */

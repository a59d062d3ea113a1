#ifndef INFLUENCE_H
#define INFLUENCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum InflStatus {
  INFL_STATUS_OK = 0,
  INFL_STATUS_NULL_POINTER = 1,
  INFL_STATUS_INVALID_ARGUMENT = 2,
  INFL_STATUS_UNKNOWN_ENV = 3,
  INFL_STATUS_DIMENSION_MISMATCH = 4,
  // Riccati non-convergence, indefinite policy precision or an
  // unstable closed loop.
  INFL_STATUS_NUMERICAL = 5,
  INFL_STATUS_MALFORMED_FILE = 6,
  INFL_STATUS_IO = 7,
  INFL_STATUS_CHECKPOINT_REQUIRED = 8,
  INFL_STATUS_STALE_TICK = 9,
  INFL_STATUS_SESSION_ENDED = 10,
  INFL_STATUS_PANIC = 11,
  INFL_STATUS_OTHER = 12,
} InflStatus;

typedef enum InflBias {
  INFL_BIAS_X = 0,
  INFL_BIAS_Y = 1,
  INFL_BIAS_FREE = 2,
} InflBias;

typedef struct InflEnv InflEnv;

typedef struct InflModel InflModel;

typedef struct InflNet InflNet;

typedef struct InflSession InflSession;

typedef struct InflTracker InflTracker;

// Outcome of one session step in the tabletop plane.
typedef struct InflTick {
  // Index of the next step.
  uint64_t tick;
  double x[2];
  double executed_u[2];
  double u_r[2];
  double action_optimality;
  double effort;
} InflTick;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *infl_version(void);

// Message of the last failure on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *infl_last_error(void);

// Solve the DARE for `(A n×n, B n×m, Q n×n, R m×m)`. Writes `P` (n×n)
// and, when `k_out` is not NULL, the gain `K` (m×n).
//
// # Safety
// Array arguments must point to the stated number of doubles.
enum InflStatus infl_dare_solve(const double *a,
                                const double *b,
                                const double *q,
                                const double *r,
                                size_t n,
                                size_t m,
                                double *p_out,
                                double *k_out);

// Built-in environment by name (`lander`, `arm`, `goal`, `pref`, ...).
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum InflStatus infl_env_new(const char *name, struct InflEnv **out);

// # Safety
// `env` must come from `infl_env_new` or be NULL.
void infl_env_free(struct InflEnv *env);

// State, action and internal-model dimensions.
//
// # Safety
// Pointers must be valid; any output may be NULL.
enum InflStatus infl_env_dims(const struct InflEnv *env,
                              size_t *state,
                              size_t *action,
                              size_t *theta);

// Copy the internal model the robot teaches toward.
//
// # Safety
// `out` must hold `len` doubles.
enum InflStatus infl_env_theta_star(const struct InflEnv *env, double *out, size_t len);

// One step of the true dynamics from `x` with control `u`, toward the
// goal selected by `goal_count` reached goals.
//
// # Safety
// `x` and `x_out` hold `state` doubles, `u` holds `action` doubles.
enum InflStatus infl_env_step(const struct InflEnv *env,
                              const double *x,
                              const double *u,
                              size_t goal_count,
                              double *x_out);

// Solve the human's control problem for internal model `theta`.
//
// # Safety
// `theta` holds `len` doubles; `out` must be writable.
enum InflStatus infl_model_new(const struct InflEnv *env,
                               const double *theta,
                               size_t len,
                               struct InflModel **out);

// # Safety
// `model` must come from `infl_model_new` or be NULL.
void infl_model_free(struct InflModel *model);

// Mean human action at state `x`.
//
// # Safety
// `x` holds `state` doubles and `u_out` holds `action` doubles.
enum InflStatus infl_model_mean_action(const struct InflModel *model,
                                       const struct InflEnv *env,
                                       const double *x,
                                       size_t goal_count,
                                       double *u_out);

// Log-density of human action `u` at state `x`.
//
// # Safety
// `x` holds `state` doubles, `u` holds `action` doubles, `out` is writable.
enum InflStatus infl_model_log_prob(const struct InflModel *model,
                                    const struct InflEnv *env,
                                    const double *x,
                                    const double *u,
                                    size_t goal_count,
                                    double *out);

// Load a trained learning-dynamics network.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum InflStatus infl_net_load(const char *path, struct InflNet **out);

// # Safety
// `net` must come from `infl_net_load` or be NULL.
void infl_net_free(struct InflNet *net);

// Start tracking one trajectory. The tracker keeps the network alive.
//
// # Safety
// `net` must be a live handle; `out` must be writable.
enum InflStatus infl_tracker_new(const struct InflNet *net, struct InflTracker **out);

// # Safety
// `tracker` must come from `infl_tracker_new` or be NULL.
void infl_tracker_free(struct InflTracker *tracker);

// Feed one observed transition `(x, u_H, x')`.
//
// # Safety
// `x`, `x_next` hold `state` doubles and `u_h` holds `action` doubles of
// the network's environment.
enum InflStatus infl_tracker_push(struct InflTracker *tracker,
                                  const double *x,
                                  const double *u_h,
                                  const double *x_next);

// Current estimate `θ̂`.
//
// # Safety
// `out` must hold `len` doubles.
enum InflStatus infl_tracker_theta(const struct InflTracker *tracker, double *out, size_t len);

// Interactive session on the tabletop arm. `net` may be NULL for
// no-teaching sessions; `planner_budget_ms` of 0 disables the cap.
//
// # Safety
// `net` must be a live handle or NULL; `out` must be writable.
enum InflStatus infl_session_new(const struct InflNet *net,
                                 bool teaching,
                                 enum InflBias bias,
                                 uint64_t seed,
                                 uint64_t planner_budget_ms,
                                 struct InflSession **out);

// # Safety
// `session` must come from `infl_session_new` or be NULL.
void infl_session_free(struct InflSession *session);

// Queue the human input for `tick`.
//
// # Safety
// `session` must be a live handle.
enum InflStatus infl_session_input(struct InflSession *session,
                                   uint64_t tick,
                                   double ux,
                                   double uy);

// Execute one step and describe it.
//
// # Safety
// `session` must be a live handle; `out` must be writable.
enum InflStatus infl_session_advance(struct InflSession *session, struct InflTick *out);

// End the session and return its summary as JSON. Release the string
// with `infl_string_free`.
//
// # Safety
// `session` must be a live handle; `out` must be writable.
enum InflStatus infl_session_finish(struct InflSession *session, char **out);

// # Safety
// `s` must come from this library or be NULL.
void infl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFLUENCE_H */

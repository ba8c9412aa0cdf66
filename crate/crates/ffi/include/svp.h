#ifndef SVP_H
#define SVP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SVP_STATUS_OK = 0,
  SVP_STATUS_NULL_POINTER = 1,
  SVP_STATUS_INVALID_UTF8 = 2,
  SVP_STATUS_INVALID_ARGUMENT = 3,
  SVP_STATUS_INVALID_MDP = 4,
  SVP_STATUS_INVALID_POLICY = 5,
  SVP_STATUS_NO_FIXED_POINT = 6,
  SVP_STATUS_NOT_DAG = 7,
  SVP_STATUS_NOT_CONVERGED = 8,
  SVP_STATUS_BUFFER_TOO_SMALL = 9,
  SVP_STATUS_IO = 10,
  SVP_STATUS_PANIC = 11,
  SVP_STATUS_INTERNAL = 12,
} SvpStatus;

/**
 * Opaque MDP handle.
 */
typedef struct SvpMdp SvpMdp;

/**
 * Opaque set-valued policy handle.
 */
typedef struct SvpPolicy SvpPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the library.
 */
const char *svp_last_error(void);

/**
 * Build an environment from a JSON spec such as `{"kind":"chain","k":5,"seed":0,"gamma":0.9}`.
 *
 * # Safety
 * `spec_json` must be a valid C string and `out` a valid pointer.
 */
SvpStatus svp_mdp_from_env_json(const char *spec_json, SvpMdp **out);

/**
 * Build an MDP from its full JSON description.
 *
 * # Safety
 * `mdp_json` must be a valid C string and `out` a valid pointer.
 */
SvpStatus svp_mdp_from_json(const char *mdp_json, SvpMdp **out);

/**
 * # Safety
 * `mdp` must come from this library and not be used afterwards. Null is ignored.
 */
void svp_mdp_free(SvpMdp *mdp);

/**
 * # Safety
 * `mdp` must be a live handle; the out pointers must be valid or null.
 */
SvpStatus svp_mdp_shape(const SvpMdp *mdp, size_t *states, size_t *actions, double *gamma);

/**
 * Write `V*` into `v_out`, which must hold at least `len >= state count` values.
 *
 * # Safety
 * `mdp` must be a live handle and `v_out` must point to `len` doubles.
 */
SvpStatus svp_value_iteration(const SvpMdp *mdp, double *v_out, size_t len);

/**
 * Solve with an algorithm name such as `near-greedy-vi` or `conservative`.
 *
 * # Safety
 * `mdp` must be a live handle, `algo` a valid C string and `out` a valid pointer.
 */
SvpStatus svp_solve(const SvpMdp *mdp, const char *algo, double zeta, SvpPolicy **out);

/**
 * # Safety
 * `json` must be a valid C string and `out` a valid pointer.
 */
SvpStatus svp_policy_from_json(const char *json, SvpPolicy **out);

/**
 * # Safety
 * `policy` must come from this library and not be used afterwards. Null is ignored.
 */
void svp_policy_free(SvpPolicy *policy);

/**
 * Bit `a` of `bits_out` is set when action `a` belongs to the set at `state`.
 *
 * # Safety
 * `policy` must be a live handle and `bits_out` a valid pointer.
 */
SvpStatus svp_policy_set(const SvpPolicy *policy, size_t state, uint64_t *bits_out);

/**
 * # Safety
 * `policy` must be a live handle and `states_out` a valid pointer.
 */
SvpStatus svp_policy_state_count(const SvpPolicy *policy, size_t *states_out);

/**
 * Worst-case values `V^pi` of `policy` on `mdp`.
 *
 * # Safety
 * Both handles must be live and `v_out` must point to `len` doubles.
 */
SvpStatus svp_evaluate(const SvpMdp *mdp, const SvpPolicy *policy, double *v_out, size_t len);

/**
 * Average set size over non-terminal states and `min V^pi / V*` over states
 * with positive `V*`. The ratio is NaN when no state qualifies.
 *
 * # Safety
 * Both handles must be live; the out pointers must be valid or null.
 */
SvpStatus svp_policy_metrics(const SvpMdp *mdp,
                             const SvpPolicy *policy,
                             double *average_size,
                             double *worst_ratio);

/**
 * Does the set at `state` contain `action`.
 *
 * # Safety
 * `policy` must be a live handle and `out` a valid pointer.
 */
SvpStatus svp_policy_contains(const SvpPolicy *policy, size_t state, size_t action, bool *out);

/**
 * Serialize a policy. Release the string with [`svp_string_free`].
 *
 * # Safety
 * `policy` must be a live handle and `out` a valid pointer.
 */
SvpStatus svp_policy_to_json(const SvpPolicy *policy, char **out);

/**
 * Serialize an MDP. Release the string with [`svp_string_free`].
 *
 * # Safety
 * `mdp` must be a live handle and `out` a valid pointer.
 */
SvpStatus svp_mdp_to_json(const SvpMdp *mdp, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards. Null is ignored.
 */
void svp_string_free(char *s);

/**
 * Checks a state index against an MDP.
 *
 * # Safety
 * `mdp` must be a live handle.
 */
SvpStatus svp_mdp_is_terminal(const SvpMdp *mdp, size_t state, bool *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVP_H */
